"""Teacher training, TTA pseudo-labeling, dataset mixing, triplet sampling and student training."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .losses import LossWeights, Switches, TripletBatch, combined_loss, cross_entropy, temporal_loss
from .nets import SegNet, SegNetConfig, SequenceEmbedder
from .synthworld import IGNORE_INDEX, VideoSequence
from .warpcore import compose_flows

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "ce", "tl", "pf", "mf", "total", "lr")


class NoSuccessorError(ValueError):
    pass


class PipelineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    steps_per_epoch: int = 50
    batch_size: int = 8
    lr: float = 0.05
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_reg: float = 0.1
    frame_gap: int = 1
    window: int = 4
    mix_ratio: float = 1.0
    seed: int = 0
    sampler: str = "triplet"  # "triplet" | "single"
    teacher_tl_weight: float = 0.1
    tl_target: str = "warped"
    embed_dim: int = 16
    lstm_hidden: int = 4
    lstm_spatial: int = 16
    tta_scales: tuple = (0.75, 1.0, 1.25)
    tta_flip: bool = True
    pseudo_threshold: float = 0.0

    def __post_init__(self):
        positive = ("epochs", "steps_per_epoch", "batch_size", "lr", "frame_gap", "window")
        for name in positive:
            if not getattr(self, name) > 0:
                raise PipelineConfigError(f"{name} must be positive")
        if self.mix_ratio < 0 or math.isnan(self.mix_ratio):
            raise PipelineConfigError("mix_ratio must lie in [0, inf]")
        if self.lambda_reg < 0:
            raise PipelineConfigError("lambda_reg must be >= 0")
        if self.sampler not in ("triplet", "single"):
            raise PipelineConfigError(f"unknown sampler {self.sampler!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_reg, self.frame_gap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tta_scales"] = list(self.tta_scales)
        if math.isinf(self.mix_ratio):
            d["mix_ratio"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PipelineConfigError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "mix_ratio" in d:
            d["mix_ratio"] = float(d["mix_ratio"])
        if "tta_scales" in d:
            d["tta_scales"] = tuple(float(s) for s in d["tta_scales"])
        return cls(**d)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power


# ------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class TrainingTriplet:
    sequence_id: int
    frame_f: int
    frame_c: int
    frame_b: int
    degenerate: bool = False


def sample_triplet(num_frames: int, center: int, window: int, rng: np.random.Generator, sequence_id: int = 0,
                   frame_gap: int = 1) -> TrainingTriplet:
    """frame_f uniform over ``[max(0, center - window), center - 1]``, frame_b = center + frame_gap.

    At center 0 there is nothing before the labeled frame; frame_f
    duplicates it and the triplet is flagged degenerate.
    """
    if center + frame_gap >= num_frames:
        raise NoSuccessorError(f"frame {center} has no successor at gap {frame_gap}")
    if center == 0:
        return TrainingTriplet(sequence_id, 0, 0, frame_gap, degenerate=True)
    lo = max(0, center - window)
    frame_f = int(rng.integers(lo, center))
    return TrainingTriplet(sequence_id, frame_f, center, center + frame_gap)


class MixedSampler:
    """Draws centers from ground-truth and pseudo-labeled pools at odds ``ratio`` (pseudo:gt)."""

    def __init__(self, gt_items: Sequence, pseudo_items: Sequence, ratio: float, rng: np.random.Generator):
        if not gt_items and not pseudo_items:
            raise ValueError("both datasets are empty")
        self.gt_items = list(gt_items)
        self.pseudo_items = list(pseudo_items)
        self.p_pseudo = 1.0 if math.isinf(ratio) else ratio / (1.0 + ratio)
        if self.p_pseudo > 0 and not self.pseudo_items:
            raise ValueError("pseudo-labeled set is empty but the mix ratio asks for it")
        if self.p_pseudo < 1 and not self.gt_items:
            raise ValueError("ground-truth set is empty but the mix ratio asks for it")
        self.rng = rng

    def draw(self):
        if self.p_pseudo > 0 and (self.p_pseudo == 1.0 or self.rng.random() < self.p_pseudo):
            pool, source = self.pseudo_items, "pseudo"
        else:
            pool, source = self.gt_items, "gt"
        return pool[int(self.rng.integers(len(pool)))], source


def combine_datasets(gt_items, pseudo_items, ratio: float, rng: np.random.Generator) -> MixedSampler:
    return MixedSampler(gt_items, pseudo_items, ratio, rng)


# ------------------------------------------------------------------ data prep


class _Prepared:
    """Tensor views of one sequence for fast batch assembly."""

    def __init__(self, seq: VideoSequence, use_pseudo: bool):
        self.n = len(seq)
        self.frames = torch.from_numpy(np.stack(seq.frames)).permute(0, 3, 1, 2).contiguous()
        h, w = seq.shape
        labels = np.full((self.n, h, w), IGNORE_INDEX, dtype=np.int64)
        for t, (lab, src) in enumerate(zip(seq.labels, seq.label_source)):
            if lab is not None and (src == "gt" or use_pseudo):
                labels[t] = lab
        self.labels = torch.from_numpy(labels)
        self.flows = [torch.from_numpy(f) for f in seq.flows]
        self._composed = {}

    def flow(self, a: int, b: int) -> torch.Tensor:
        if b == a + 1:
            return self.flows[a]
        if (a, b) not in self._composed:
            f = self.flows[a]
            for t in range(a + 1, b):
                f = compose_flows(f, self.flows[t])
            self._composed[(a, b)] = f
        return self._composed[(a, b)]


def _centers(sequences, source, gap):
    return [(sid, t) for sid, seq in enumerate(sequences)
            for t in seq.labeled_indices(source) if t + gap < len(seq)]


def _make_batch(prepared, triplets) -> TripletBatch:
    frames = tuple(torch.stack([prepared[tr.sequence_id].frames[getattr(tr, k)] for tr in triplets])
                   for k in ("frame_f", "frame_c", "frame_b"))
    labels = tuple(torch.stack([prepared[tr.sequence_id].labels[getattr(tr, k)] for tr in triplets])
                   for k in ("frame_f", "frame_c", "frame_b"))
    flow = torch.stack([prepared[tr.sequence_id].flow(tr.frame_c, tr.frame_b) for tr in triplets])
    return TripletBatch(frames=frames, labels=labels, flow_cb=flow)


def _single_batch(prepared, items) -> TripletBatch:
    """Center frames only, replicated so the batch layout stays uniform."""
    fr = torch.stack([prepared[sid].frames[t] for sid, t in items])
    lab = torch.stack([prepared[sid].labels[t] for sid, t in items])
    empty = torch.full_like(lab, IGNORE_INDEX)
    return TripletBatch(frames=(fr, fr, fr), labels=(empty, lab, empty),
                        flow_cb=torch.zeros(*fr.shape[:1], *fr.shape[2:], 2))


def _optimizer(net, config: TrainConfig, embedder=None):
    groups = [{"params": list(net.parameters()), "weight_decay": config.weight_decay}]
    if embedder is not None:
        groups.append({"params": list(embedder.parameters()), "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=config.lr, momentum=config.momentum)


def _row(epoch, step, breakdown, total, lr):
    row = {"epoch": epoch, "step": step, "total": f"{total:.6f}", "lr": f"{lr:.6f}"}
    for k in ("ce", "tl", "pf", "mf"):
        row[k] = f"{breakdown[k]:.6f}" if k in breakdown else ""
    return row


def write_log(path, rows) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    net: SegNet
    log: list = field(default_factory=list)
    embedder: Optional[SequenceEmbedder] = None
    diagnostics: Counter = field(default_factory=Counter)


def train_teacher(sequences: Sequence[VideoSequence], config: TrainConfig, use_tl: bool = True,
                  net_config: Optional[SegNetConfig] = None) -> TrainResult:
    """Cross-entropy on labeled frames, plus the temporal loss wherever the labeled frame has a successor."""
    num_classes = sequences[0].num_classes
    net_config = net_config or SegNetConfig.teacher(num_classes, seed=config.seed)
    gap = config.frame_gap
    centers = [(sid, t) for sid, seq in enumerate(sequences) for t in seq.labeled_indices("gt")]
    if not centers:
        raise ValueError("teacher training needs at least one labeled frame")
    rng = np.random.default_rng([config.seed, 1])
    prepared = [_Prepared(seq, use_pseudo=False) for seq in sequences]
    net = SegNet(net_config)
    net.train()
    opt = _optimizer(net, config)
    rows = []
    step = 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            lr = poly_lr(config.lr, step, config.total_steps, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            items = [centers[int(i)] for i in rng.integers(len(centers), size=config.batch_size)]
            frames = torch.stack([prepared[s].frames[t] for s, t in items])
            labels = torch.stack([prepared[s].labels[t] for s, t in items])
            paired = [k for k, (s, t) in enumerate(items) if t + gap < prepared[s].n]
            if use_tl and paired:
                nxt = torch.stack([prepared[items[k][0]].frames[items[k][1] + gap] for k in paired])
                logits, _ = net(torch.cat([frames, nxt]))
                logits_c, logits_b = logits[:len(items)], logits[len(items):]
            else:
                logits, _ = net(frames)
                logits_c = logits
            ce = cross_entropy(logits_c, labels)
            breakdown = {"ce": float(ce.detach())}
            total = ce
            if use_tl and paired:
                flow = torch.stack([prepared[items[k][0]].flow(items[k][1], items[k][1] + gap) for k in paired])
                tl = temporal_loss(F.softmax(logits_c[paired], 1), F.softmax(logits_b, 1), flow, frames[paired], nxt,
                                   target=config.tl_target)
                breakdown["tl"] = float(tl.detach())
                total = total + config.teacher_tl_weight * tl
            opt.zero_grad()
            total.backward()
            opt.step()
            rows.append(_row(epoch, step, breakdown, float(total.detach()), lr))
            step += 1
        log.info("teacher epoch %d: %s", epoch, rows[-1])
    net.eval()
    return TrainResult(net=net, log=rows)


def _freeze(net):
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def train_student(sequences: Sequence[VideoSequence], teacher: Optional[SegNet], config: TrainConfig,
                  switches: Switches = Switches(), net_config: Optional[SegNetConfig] = None) -> TrainResult:
    """Train a student under the combined loss with the chosen terms switched on.

    ``sequences`` carry ground-truth labels and, if pseudo-labeling ran,
    pseudo labels; the latter are used only with ``switches.pl``.
    """
    if switches.mf and config.sampler != "triplet":
        raise PipelineConfigError("MF distillation needs the triplet sampler")
    if (switches.pf or switches.mf) and teacher is None:
        raise PipelineConfigError("PF/MF distillation needs a teacher")
    num_classes = sequences[0].num_classes
    net_config = net_config or SegNetConfig.student(num_classes, seed=config.seed)
    gap = config.frame_gap
    rng = np.random.default_rng([config.seed, 2])
    sampler = combine_datasets(
        _centers(sequences, "gt", gap),
        _centers(sequences, "pseudo", gap) if switches.pl else [],
        config.mix_ratio if switches.pl else 0.0,
        rng,
    )
    prepared = [_Prepared(seq, use_pseudo=switches.pl) for seq in sequences]
    if teacher is not None:
        _freeze(teacher)
    student = SegNet(net_config)
    student.train()
    embedder = None
    if switches.mf:
        embedder = SequenceEmbedder(config.lstm_hidden, config.lstm_spatial, config.embed_dim, seed=config.seed + 17)
        embedder.train()
    opt = _optimizer(student, config, embedder)
    diagnostics = Counter()
    rows, step = [], 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            lr = poly_lr(config.lr, step, config.total_steps, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            items = [sampler.draw()[0] for _ in range(config.batch_size)]
            if config.sampler == "triplet":
                triplets = [sample_triplet(prepared[s].n, t, config.window, rng, s, gap) for s, t in items]
                batch = _make_batch(prepared, triplets)
            else:
                batch = _single_batch(prepared, items)
            total, breakdown = combined_loss(batch, student, teacher, embedder, config.weights(), switches,
                                             diagnostics, tl_target=config.tl_target)
            opt.zero_grad()
            total.backward()
            opt.step()
            if embedder is not None:
                embedder.clip_()
            rows.append(_row(epoch, step, breakdown, float(total.detach()), lr))
            step += 1
        log.info("student epoch %d: %s", epoch, rows[-1])
    student.eval()
    return TrainResult(net=student, log=rows, embedder=embedder, diagnostics=diagnostics)


# -------------------------------------------------------------- pseudo labels


@dataclass
class PseudoLabelSet:
    labels: dict = field(default_factory=dict)  # (sequence_id, frame) -> uint8 map
    provenance: dict = field(default_factory=dict)  # (sequence_id, frame) -> "pseudo"

    def __len__(self):
        return len(self.labels)


def _even(n: float) -> int:
    return max(2, int(round(n / 2.0)) * 2)


@torch.no_grad()
def tta_probabilities(net, frames: torch.Tensor, scales=(0.75, 1.0, 1.25), flip: bool = True) -> torch.Tensor:
    """Softmax averaged over scales × {identity, horizontal flip}, mapped back to the input grid."""
    h, w = frames.shape[-2:]
    acc = torch.zeros(frames.shape[0], net.config.num_classes, h, w, dtype=frames.dtype)
    count = 0
    for s in scales:
        size = (_even(h * s), _even(w * s))
        if min(size) < 8:
            raise ValueError(f"test-time scale {s} gives a {size[0]}x{size[1]} input, below 8 pixels")
        x = frames if size == (h, w) else F.interpolate(frames, size=size, mode="bilinear", align_corners=False)
        for flipped in ((False, True) if flip else (False,)):
            xi = x.flip(-1) if flipped else x
            p = F.softmax(net(xi)[0], dim=1)
            if flipped:
                p = p.flip(-1)
            if size != (h, w):
                p = F.interpolate(p, size=(h, w), mode="bilinear", align_corners=False)
            acc += p
            count += 1
    return acc / count


def generate_pseudo_labels(teacher: SegNet, sequences: Sequence[VideoSequence], scales=(0.75, 1.0, 1.25),
                           flip: bool = True, threshold: float = 0.0) -> PseudoLabelSet:
    """Label every frame without ground truth; a pixel is kept only if its top probability exceeds ``threshold``."""
    teacher.eval()
    out = PseudoLabelSet()
    for sid, seq in enumerate(sequences):
        todo = [t for t, lab in enumerate(seq.labels) if lab is None]
        if not todo:
            continue
        frames = torch.from_numpy(np.stack([seq.frames[t] for t in todo])).permute(0, 3, 1, 2).contiguous()
        probs = tta_probabilities(teacher, frames, scales, flip)
        conf, label = probs.max(dim=1)
        label[conf <= threshold] = IGNORE_INDEX
        for t, lab in zip(todo, label.to(torch.uint8).numpy()):
            out.labels[(sid, t)] = lab
            out.provenance[(sid, t)] = "pseudo"
    return out


def apply_pseudo_labels(sequences: Sequence[VideoSequence], pseudo: PseudoLabelSet) -> list[VideoSequence]:
    """Copies of ``sequences`` with pseudo labels filled into unlabeled frames only."""
    out = []
    for sid, seq in enumerate(sequences):
        labels, source = list(seq.labels), list(seq.label_source)
        for t in range(len(seq)):
            if (sid, t) in pseudo.labels and labels[t] is None:
                labels[t] = pseudo.labels[(sid, t)]
                source[t] = "pseudo"
        out.append(replace(seq, labels=labels, label_source=source))
    return out


# ----------------------------------------------------------- whole algorithm


@dataclass
class PipelineResult:
    teacher: SegNet
    student: SegNet
    embedder: Optional[SequenceEmbedder]
    pseudo: Optional[PseudoLabelSet]
    teacher_log: list
    student_log: list


def run_pipeline(sequences, config: TrainConfig, switches: Switches, teacher_config: Optional[TrainConfig] = None,
                 teacher: Optional[SegNet] = None) -> PipelineResult:
    """Teacher with TL, TTA pseudo labels, mixed dataset, student under the selected terms."""
    teacher_log = []
    if teacher is None:
        res = train_teacher(sequences, teacher_config or config, use_tl=True)
        teacher, teacher_log = res.net, res.log
    pseudo = None
    data = sequences
    if switches.pl:
        pseudo = generate_pseudo_labels(teacher, sequences, config.tta_scales, config.tta_flip,
                                        config.pseudo_threshold)
        data = apply_pseudo_labels(sequences, pseudo)
    res = train_student(data, teacher, config, switches)
    return PipelineResult(teacher, res.net, res.embedder, pseudo, teacher_log, res.log)
