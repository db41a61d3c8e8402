"""Training objectives: cross-entropy, temporal loss, PF/MF distillation and their combination."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .synthworld import IGNORE_INDEX
from .warpcore import occlusion_mask, warp_backward

POOL_SIZE = 16


class ProbabilityError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 0.1
    frame_gap: int = 1

    def __post_init__(self):
        if self.lambda_reg < 0 or self.frame_gap < 1:
            raise ValueError("lambda_reg must be >= 0 and frame_gap >= 1")


@dataclass(frozen=True)
class Switches:
    tl: bool = False
    pf: bool = False
    mf: bool = False
    pl: bool = False

    # row labels of the ablation ladder
    SCHEMES = {
        "a": (),
        "b": ("pf",),
        "c": ("mf",),
        "d": ("pf", "mf"),
        "e": ("tl",),
        "f": ("pf", "mf", "tl"),
        "j": ("pl",),
        "k": ("tl", "pl"),
        "l": ("pf", "mf", "tl", "pl"),
    }

    @classmethod
    def scheme(cls, name: str) -> "Switches":
        try:
            return cls(**{k: True for k in cls.SCHEMES[name]})
        except KeyError:
            raise ValueError(f"unknown scheme {name!r}; choose from {sorted(cls.SCHEMES)}") from None


# ------------------------------------------------------------------ AT operator


def at_operator(x1, x2, diagnostics: Optional[Counter] = None):
    """Cosine similarity between every row of ``x1`` and every row of ``x2``.

    Inputs are ``[..., N, C]``. Rows with zero norm give similarity 0; their
    count is added to ``diagnostics["zero_norm_rows"]`` when a counter is given.
    """
    if x1.shape[-1] != x2.shape[-1] or x1.shape[-2] != x2.shape[-2]:
        raise ValueError(f"AT operator needs matching N and C, got {tuple(x1.shape)} and {tuple(x2.shape)}")

    def unit(x):
        norm = x.norm(dim=-1, keepdim=True)
        nonzero = norm > 0
        return x / torch.where(nonzero, norm, torch.ones_like(norm)) * nonzero, int((~nonzero).sum())

    u1, z1 = unit(x1)
    u2, z2 = unit(x2)
    if diagnostics is not None and z1 + z2:
        diagnostics["zero_norm_rows"] += z1 + z2
    return u1 @ u2.transpose(-1, -2)


def flatten_grid(x, pool: int = POOL_SIZE):
    """``[B, C, H, W]`` -> ``[B, N, C]`` after average pooling to at most pool×pool."""
    if x.shape[-2] > pool or x.shape[-1] > pool:
        x = F.adaptive_avg_pool2d(x, pool)
    return x.flatten(2).transpose(1, 2)


def pf_loss(qs_t, qs_tk, qt_t, qt_tk, pool: int = POOL_SIZE, diagnostics: Optional[Counter] = None):
    """Mean squared difference between student and teacher cross-frame similarity maps."""
    a_s = at_operator(flatten_grid(qs_t, pool), flatten_grid(qs_tk, pool), diagnostics)
    with torch.no_grad():
        a_t = at_operator(flatten_grid(qt_t, pool), flatten_grid(qt_tk, pool), diagnostics)
    if a_s.shape != a_t.shape:
        raise ValueError(f"student map {tuple(a_s.shape)} and teacher map {tuple(a_t.shape)} differ in N")
    return ((a_s - a_t) ** 2).mean()


def similarity_map_loss(a_s, a_t):
    return ((a_s - a_t.detach()) ** 2).mean()


def mf_loss(e_s, e_t):
    """Squared Euclidean distance to a fixed teacher embedding, averaged over the batch."""
    if e_s.shape != e_t.shape:
        raise ValueError(f"embedding shapes differ: {tuple(e_s.shape)} vs {tuple(e_t.shape)}")
    d = ((e_t.detach() - e_s) ** 2).sum(dim=-1)
    return d.mean()


def normalize_embedding(e):
    return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------- temporal loss


def _check_simplex(q, name, tol=1e-4):
    err = (q.sum(dim=1) - 1).abs().max().item()
    if err > tol or (q < -tol).any():
        raise ProbabilityError(f"{name} rows are not on the probability simplex (max sum error {err:.2e})")


def temporal_loss(q_t, q_tk, flow, img_t, img_tk, symmetric: bool = False, target: str = "warped",
                  eps: float = 1e-12):
    """V-weighted KL(q_t || warped q_tk), averaged over all pixels.

    ``q_*`` are ``[B, K, H, W]`` probabilities, ``flow`` is ``[B, H, W, 2]``
    mapping frame t onto t+k, images are ``[B, 3, H, W]``. The warped
    target is detached; pixels whose sample falls outside the frame count
    as zero but stay in the denominator. Clamp-to-edge sampling keeps the
    bilinear weights summing to one, so the warped rows stay on the simplex.
    """
    _check_simplex(q_t, "q_t")
    _check_simplex(q_tk, "q_tk")
    if target not in ("warped", "current", "none"):
        raise ValueError(f"unknown KL target {target!r}")
    q_hat, valid = warp_backward(q_tk.detach() if target == "warped" else q_tk, flow)
    if target == "current":
        q_t = q_t.detach()
    with torch.no_grad():
        img_hat, _ = warp_backward(img_tk, flow)
        weight = occlusion_mask(img_t, img_hat) * valid.to(img_t.dtype)
    log_hat = q_hat.clamp_min(eps).log()
    kl = (q_t * (q_t.clamp_min(eps).log() - log_hat)).sum(dim=1)
    if symmetric:
        kl = 0.5 * (kl + (q_hat * (log_hat - q_t.clamp_min(eps).log())).sum(dim=1))
    return (weight * kl).mean()


def instance_temporal_loss(masks_t, masks_t1, matching, flow, img_t, img_t1, detach_target: bool = True):
    """Sum over matched instances of V-weighted squared error against the warped t+1 mask.

    Masks are ``[H, W]`` tensors, frames ``[3, H, W]``, flow ``[H, W, 2]``
    mapping t onto t+1. Pixels are summed, not averaged.
    """
    img_hat, valid = warp_backward(img_t1, flow)
    weight = occlusion_mask(img_t, img_hat) * valid.to(img_t.dtype)
    total = img_t.new_zeros(())
    for n, m in matching:
        if not (0 <= n < len(masks_t) and 0 <= m < len(masks_t1)):
            raise IndexError(f"matching pair ({n}, {m}) out of range")
        target, _ = warp_backward(masks_t1[m][None], flow)
        if detach_target:
            target = target.detach()
        total = total + (weight * (masks_t[n] - target[0]) ** 2).sum()
    return total


def _soft_iou(a, b):
    inter = np.minimum(a, b).sum()
    union = np.maximum(a, b).sum()
    return float(inter / union) if union > 0 else 0.0


def _centroid(m):
    total = m.sum()
    if total <= 0:
        return None
    ys, xs = np.mgrid[0:m.shape[0], 0:m.shape[1]]
    return np.array([(xs * m).sum() / total, (ys * m).sum() / total])


def instance_affinity(masks_t, masks_t1, scores_t, scores_t1, weights=(1.0, 0.25, 0.25)):
    """Pairwise affinity matrix; pairs with neither overlap nor proximity get -inf."""
    w_iou, w_score, w_loc = weights
    mt = [np.asarray(m, dtype=np.float64) for m in masks_t]
    mt1 = [np.asarray(m, dtype=np.float64) for m in masks_t1]
    h, w = mt[0].shape
    reach = 0.25 * np.hypot(h, w)
    aff = np.full((len(mt), len(mt1)), -np.inf)
    for i, a in enumerate(mt):
        ca = _centroid(a)
        for j, b in enumerate(mt1):
            cb = _centroid(b)
            iou = _soft_iou(a, b)
            loc = 0.0 if ca is None or cb is None else max(0.0, 1.0 - np.linalg.norm(ca - cb) / reach)
            if iou <= 0 and loc <= 0:
                continue
            score_sim = 1.0 - abs(float(scores_t[i]) - float(scores_t1[j]))
            aff[i, j] = w_iou * iou + w_score * score_sim + w_loc * loc
    return aff


def match_instances(masks_t, masks_t1, scores_t, scores_t1, weights=(1.0, 0.25, 0.25), threshold=0.1):
    """Greedy association of instances in adjacent frames by descending affinity."""
    if len(masks_t) == 0 or len(masks_t1) == 0:
        return []
    aff = instance_affinity(masks_t, masks_t1, scores_t, scores_t1, weights)
    pairs = sorted(((aff[i, j], i, j) for i, j in itertools.product(*map(range, aff.shape))
                    if aff[i, j] > threshold), key=lambda p: (-p[0], p[1], p[2]))
    used_t, used_t1, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_t or j in used_t1:
            continue
        used_t.add(i)
        used_t1.add(j)
        out.append((i, j))
    return sorted(out)


# ----------------------------------------------------------------- combination


def cross_entropy(logits, labels):
    """Mean CE over non-ignored pixels; 0 (with grad) when every pixel is ignored."""
    per_pixel = F.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX, reduction="none")
    count = (labels != IGNORE_INDEX).sum()
    if count == 0:
        return logits.sum() * 0.0
    return per_pixel.sum() / count


@dataclass
class TripletBatch:
    """Stacked training triplets; positions are (frame_f, frame_c, frame_b).

    ``labels`` has one ``[B, H, W]`` long tensor per position, with
    IGNORE_INDEX wherever no label is available. ``flow_cb`` maps the
    center frame onto its successor.
    """

    frames: tuple  # 3 × [B, 3, H, W]
    labels: tuple  # 3 × [B, H, W]
    flow_cb: torch.Tensor

    def has_labels(self, pos: int) -> bool:
        return bool((self.labels[pos] != IGNORE_INDEX).any())


def combined_loss(batch: TripletBatch, student, teacher=None, embedder=None, weights: LossWeights = LossWeights(),
                  switches: Switches = Switches(), diagnostics: Optional[Counter] = None,
                  tl_target: str = "warped"):
    """``Σ ce + λ (tl + pf + mf)`` over one batch of triplets.

    Returns ``(total, breakdown)``; breakdown maps each active term name to
    a detached float and omits inactive ones.
    """
    need_all = switches.pf or switches.mf or any(batch.has_labels(p) for p in (0, 2))
    positions = (0, 1, 2) if need_all else ((1, 2) if switches.tl else (1,))
    outputs = {p: student(batch.frames[p]) for p in positions}

    ce = sum(cross_entropy(outputs[p][0], batch.labels[p]) for p in positions if batch.has_labels(p))
    if not torch.is_tensor(ce):
        ce = outputs[1][0].sum() * 0.0
    breakdown = {"ce": ce}
    reg = ce.new_zeros(())

    probs = {p: F.softmax(outputs[p][0], dim=1) for p in positions}
    if switches.tl:
        tl = temporal_loss(probs[1], probs[2], batch.flow_cb, batch.frames[1], batch.frames[2], target=tl_target)
        breakdown["tl"] = tl
        reg = reg + tl

    if switches.pf or switches.mf:
        if teacher is None:
            raise ValueError("PF/MF distillation needs a teacher")
        with torch.no_grad():
            t_out = {p: teacher(batch.frames[p]) for p in (0, 1, 2)}
            t_probs = {p: F.softmax(t_out[p][0], dim=1) for p in (0, 1, 2)}
        if switches.pf:
            pf = sum(pf_loss(probs[a], probs[b], t_probs[a], t_probs[b], diagnostics=diagnostics)
                     for a, b in ((0, 1), (1, 2)))
            breakdown["pf"] = pf
            reg = reg + pf
        if switches.mf:
            if embedder is None:
                raise ValueError("MF distillation needs a sequence embedder")
            s_maps = [self_similarity(outputs[p][1], diagnostics) for p in (0, 1, 2)]
            with torch.no_grad():
                e_t = normalize_embedding(embedder([self_similarity(t_out[p][1], diagnostics) for p in (0, 1, 2)]))
            mf = mf_loss(embedder(s_maps), e_t)
            breakdown["mf"] = mf
            reg = reg + mf

    total = ce + weights.lambda_reg * reg
    return total, {k: float(v.detach()) for k, v in breakdown.items()}


def self_similarity(feature, diagnostics: Optional[Counter] = None, pool: int = POOL_SIZE):
    x = flatten_grid(feature, pool)
    return at_operator(x, x, diagnostics)
