"""Accuracy and smoothness metrics: mIoU, pixel accuracy and warped-mIoU temporal consistency."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .synthworld import IGNORE_INDEX, VideoSequence
from .warpcore import warp_labels


class NothingToEvaluate(ValueError):
    pass


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = gt != IGNORE_INDEX
    idx = num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def miou(preds: Sequence, gts: Sequence, num_classes: int):
    """Returns ``(miou, per_class_iou, pixel_accuracy)`` from one global confusion matrix."""
    if len(preds) != len(gts):
        raise ValueError("need one prediction per ground-truth map")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(p, g, num_classes)
    total = conf.sum()
    if total == 0:
        raise NothingToEvaluate("every pixel is ignore_index")
    per_class = iou_from_confusion(conf)
    return _exact_mean_iou(conf), per_class, float(np.trace(conf) / total)


def _exact_mean_iou(conf: np.ndarray) -> float:
    # rational arithmetic on the integer counts, rounded once
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    terms = [Fraction(int(i), int(u)) for i, u in zip(inter, union) if u > 0]
    return float(sum(terms) / len(terms))


def _pair_class_iou(q_t, q_hat, valid, num_classes):
    keep = valid.astype(bool)
    a, b = q_t[keep], q_hat[keep]
    classes = np.union1d(np.unique(a), np.unique(b))
    out = np.full(num_classes, np.nan)
    for c in classes:
        if c == IGNORE_INDEX:
            continue
        ia, ib = a == c, b == c
        out[int(c)] = (ia & ib).sum() / (ia | ib).sum()
    return out


def tc_pair(q_t, q_tm1, flow, occlusion=None, num_classes: Optional[int] = None, per_class: bool = False):
    """Warped IoU between the current labels and the previous labels moved onto frame t.

    ``flow`` maps frame t back onto t-1 (backward sampling of ``q_tm1``
    with nearest neighbours). Pixels warped from outside the frame, or
    marked 0 in ``occlusion``, are left out of both intersection and union.
    Returns NaN when no pixel is valid.
    """
    q_t = np.asarray(q_t)
    q_tm1 = np.asarray(q_tm1)
    if q_t.shape != q_tm1.shape or np.asarray(flow).shape[:2] != q_t.shape:
        raise ValueError("label maps and flow must share one spatial shape")
    q_hat, valid = warp_labels(q_tm1, flow)
    if occlusion is not None:
        valid = valid & np.asarray(occlusion).astype(np.uint8)
    n = num_classes if num_classes is not None else int(max(q_t.max(), q_tm1.max())) + 1
    n = min(n, IGNORE_INDEX)
    ious = _pair_class_iou(q_t, q_hat, valid, n)
    if per_class:
        return ious
    return float(np.nanmean(ious)) if np.isfinite(ious).any() else float("nan")


def tc_sequence(preds: Sequence, flows_bwd: Sequence, occlusion_bwd: Optional[Sequence] = None):
    """Mean warped IoU over consecutive pairs and the per-pair curve.

    ``flows_bwd[t]`` maps frame t+1 back onto frame t.
    """
    if len(preds) < 2:
        raise ValueError("temporal consistency needs at least two frames")
    if len(flows_bwd) != len(preds) - 1:
        raise ValueError("need exactly one flow per consecutive pair")
    curve = np.array([
        tc_pair(preds[t + 1], preds[t], flows_bwd[t], None if occlusion_bwd is None else occlusion_bwd[t])
        for t in range(len(preds) - 1)
    ])
    return float(np.nanmean(curve)), curve


@dataclass
class MetricReport:
    miou: float
    pixel_accuracy: float
    tc: float
    per_class: list = field(default_factory=list)  # (class, iou, tc)
    per_pair_tc: dict = field(default_factory=dict)  # sequence id -> curve

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        w.writerow(["miou", "", f"{self.miou:.6f}"])
        w.writerow(["pixel_accuracy", "", f"{self.pixel_accuracy:.6f}"])
        w.writerow(["tc", "", f"{self.tc:.6f}"])
        for c, iou, tc in self.per_class:
            w.writerow(["class_iou", c, _fmt(iou)])
            w.writerow(["class_tc", c, _fmt(tc)])
        for sid, curve in sorted(self.per_pair_tc.items()):
            for t, v in enumerate(curve):
                w.writerow([f"pair_tc/{sid}", t, _fmt(v)])
        return buf.getvalue()

    def per_class_table(self, class_names=None) -> str:
        names = class_names or {}
        lines = [f"{'class':<12}{'IoU':>8}{'TC':>8}"]
        for c, iou, tc in self.per_class:
            lines.append(f"{names.get(c, str(c)):<12}{_pct(iou):>8}{_pct(tc):>8}")
        lines.append(f"{'mean':<12}{_pct(self.miou):>8}{_pct(self.tc):>8}")
        return "\n".join(lines)

    def summary(self) -> dict:
        return {"miou": self.miou, "pixel_accuracy": self.pixel_accuracy, "tc": self.tc}


def _fmt(v):
    return "" if v is None or not np.isfinite(v) else f"{v:.6f}"


def _pct(v):
    return "-" if v is None or not np.isfinite(v) else f"{100 * v:.2f}"


@torch.no_grad()
def predict_sequence(net, seq: VideoSequence, batch_size: int = 16) -> list[np.ndarray]:
    was_training = net.training
    net.eval()
    frames = torch.from_numpy(np.stack(seq.frames)).permute(0, 3, 1, 2).contiguous()
    preds = []
    for i in range(0, len(frames), batch_size):
        logits, _ = net(frames[i:i + batch_size])
        preds.extend(logits.argmax(1).to(torch.uint8).numpy())
    net.train(was_training)
    return preds


def report_from_predictions(preds_by_seq: dict, sequences: Sequence[VideoSequence], sampled_ids: Sequence[int],
                            num_classes: int) -> MetricReport:
    """Accuracy on every GT-labeled frame, TC on the sampled sequences."""
    if len(sampled_ids) == 0:
        raise ValueError("evaluation subset is empty")
    ps, gs = [], []
    for sid, seq in enumerate(sequences):
        for t in seq.labeled_indices("gt"):
            ps.append(preds_by_seq[sid][t])
            gs.append(seq.labels[t])
    mean_iou, class_iou, pix_acc = miou(ps, gs, num_classes)

    curves, class_tc = {}, []
    for sid in sampled_ids:
        seq = sequences[sid]
        preds = preds_by_seq[sid]
        _, curves[sid] = tc_sequence(preds, seq.flows_bwd, seq.occlusion_bwd)
        for t in range(len(preds) - 1):
            class_tc.append(tc_pair(preds[t + 1], preds[t], seq.flows_bwd[t], seq.occlusion_bwd[t],
                                    num_classes=num_classes, per_class=True))
    seq_means = [np.nanmean(c) for c in curves.values()]
    tc = float(np.nanmean(seq_means))
    class_tc = np.array([np.nanmean(col) if np.isfinite(col).any() else np.nan for col in np.stack(class_tc).T])
    per_class = [(c, float(class_iou[c]), float(class_tc[c])) for c in range(num_classes) if np.isfinite(class_iou[c])]
    return MetricReport(miou=mean_iou, pixel_accuracy=pix_acc, tc=tc, per_class=per_class, per_pair_tc=curves)


def evaluate_model(net, sequences: Sequence[VideoSequence], sampled_ids: Sequence[int],
                   num_classes: Optional[int] = None) -> MetricReport:
    num_classes = num_classes or sequences[0].num_classes
    if len(sampled_ids) == 0:
        raise ValueError("evaluation subset is empty")
    preds = {sid: predict_sequence(net, seq) for sid, seq in enumerate(sequences)}
    return report_from_predictions(preds, sequences, sampled_ids, num_classes)


def oracle_report(sequences: Sequence[VideoSequence], sampled_ids: Sequence[int]) -> MetricReport:
    """Report for a predictor that returns the ground truth; needs fully labeled sequences."""
    preds = {sid: [lab for lab in seq.labels] for sid, seq in enumerate(sequences)}
    for sid in sampled_ids:
        if any(p is None for p in preds[sid]):
            raise ValueError(f"sequence {sid} is not fully labeled")
    return report_from_predictions(preds, sequences, sampled_ids, sequences[0].num_classes)


def read_subset(path) -> list[int]:
    return [int(tok) for tok in Path(path).read_text().split() if not tok.startswith("#")]


def write_subset(path, ids) -> None:
    Path(path).write_text("\n".join(str(i) for i in ids) + "\n")


def ablation_table(rows: dict) -> str:
    """rows: scheme -> summary dict (miou, pixel_accuracy, tc), rendered like the ablation ladder."""
    lines = [f"{'Scheme':<8}{'TL':>4}{'PF':>4}{'MF':>4}{'PL':>4}{'mIoU':>9}{'PixAcc':>9}{'TC':>9}"]
    from .losses import Switches

    for name, r in rows.items():
        sw = Switches.scheme(name)
        marks = "".join(f"{'x' if on else '':>4}" for on in (sw.tl, sw.pf, sw.mf, sw.pl))
        lines.append(f"{name:<8}{marks}{100 * r['miou']:>9.2f}{100 * r['pixel_accuracy']:>9.2f}{100 * r['tc']:>9.2f}")
    return "\n".join(lines)
