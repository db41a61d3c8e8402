"""Backward warping along flow, photometric occlusion masks and flow composition.

Tensors are channel-first (``[B, C, H, W]`` or ``[C, H, W]``); flows are
channel-last ``[B, H, W, 2]`` / ``[H, W, 2]`` holding (u, v) in pixels, the
same layout as the ``.flo`` files. The flow at pixel i says where i moves
to, so ``warp_backward(source, flow)[i]`` reads ``source`` at ``i + flow(i)``.
numpy inputs are accepted and give numpy outputs.
"""
from __future__ import annotations

import numpy as np
import torch


def _to_torch(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype or torch.float64), True


def _check(source, flow):
    if source.dim() not in (3, 4):
        raise ValueError(f"source must be [C,H,W] or [B,C,H,W], got {tuple(source.shape)}")
    if flow.dim() != source.dim() or flow.shape[-1] != 2:
        raise ValueError(f"flow shape {tuple(flow.shape)} does not pair with source {tuple(source.shape)}")
    if flow.shape[-3:-1] != source.shape[-2:] or (source.dim() == 4 and flow.shape[0] != source.shape[0]):
        raise ValueError(f"flow {tuple(flow.shape)} and source {tuple(source.shape)} disagree in size")


def sample_coords(flow: torch.Tensor):
    """Absolute sample positions ``i + flow(i)`` and their in-frame mask."""
    h, w = flow.shape[-3], flow.shape[-2]
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, w)
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return sx, sy, valid


def _gather(src, iy, ix):
    # src [B,C,H,W], iy/ix [B,H,W] long
    b, c, h, w = src.shape
    flat = (iy * w + ix).view(b, 1, h * w).expand(b, c, h * w)
    return torch.gather(src.reshape(b, c, h * w), 2, flat).view(b, c, h, w)


def warp_backward(source, flow, mode: str = "bilinear"):
    """Sample ``source`` at ``i + flow(i)`` with clamp-to-edge boundary.

    Returns ``(warped, valid)`` where ``valid`` marks sample positions that
    were inside the image before clamping. Bilinear mode is differentiable
    in ``source``; nearest mode rounds half up.
    """
    src, from_np = _to_torch(source)
    flw, _ = _to_torch(flow, src.dtype if src.is_floating_point() else torch.float64)
    _check(src, flw)
    squeeze = src.dim() == 3
    if squeeze:
        src, flw = src.unsqueeze(0), flw.unsqueeze(0)
    if src.is_floating_point():
        flw = flw.to(src.dtype)
    h, w = src.shape[-2:]
    sx, sy, valid = sample_coords(flw)
    sx = sx.clamp(0, w - 1)
    sy = sy.clamp(0, h - 1)

    if mode == "nearest":
        ix = torch.floor(sx + 0.5).long().clamp(0, w - 1)
        iy = torch.floor(sy + 0.5).long().clamp(0, h - 1)
        out = _gather(src, iy, ix)
    elif mode == "bilinear":
        x0 = torch.floor(sx).clamp(0, w - 1)
        y0 = torch.floor(sy).clamp(0, h - 1)
        wx = (sx - x0).unsqueeze(1)
        wy = (sy - y0).unsqueeze(1)
        x0l, y0l = x0.long(), y0.long()
        x1l = (x0l + 1).clamp(max=w - 1)
        y1l = (y0l + 1).clamp(max=h - 1)
        out = (
            _gather(src, y0l, x0l) * (1 - wx) * (1 - wy)
            + _gather(src, y0l, x1l) * wx * (1 - wy)
            + _gather(src, y1l, x0l) * (1 - wx) * wy
            + _gather(src, y1l, x1l) * wx * wy
        )
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")

    if squeeze:
        out, valid = out[0], valid[0]
    if from_np:
        return out.numpy(), valid.numpy().astype(np.uint8)
    return out, valid


def warp_labels(labels, flow):
    """Nearest-neighbour warp of a hard label map ``[H, W]`` (numpy in, numpy out)."""
    lab = torch.from_numpy(np.ascontiguousarray(labels).astype(np.int64))[None]
    out, valid = warp_backward(lab, torch.from_numpy(np.asarray(flow, dtype=np.float64)), mode="nearest")
    return out[0].numpy().astype(np.asarray(labels).dtype), valid.numpy().astype(np.uint8)


def occlusion_mask(frame_t, warped_frame_tk):
    """``exp(-d)`` with d the per-pixel mean absolute difference over channels.

    Channel axis is -3 for tensors; numpy frames are ``H×W×3``.
    """
    if isinstance(frame_t, np.ndarray):
        a, b = np.asarray(frame_t, np.float64), np.asarray(warped_frame_tk, np.float64)
        if a.shape != b.shape:
            raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
        return np.exp(-np.abs(a - b).mean(axis=-1))
    if frame_t.shape != warped_frame_tk.shape:
        raise ValueError(f"frame shapes differ: {tuple(frame_t.shape)} vs {tuple(warped_frame_tk.shape)}")
    return torch.exp(-(frame_t - warped_frame_tk).abs().mean(dim=-3))


def compose_flows(f_ab, f_bc):
    """Flow a→c from a→b followed by b→c: ``f_ab(i) + f_bc(i + f_ab(i))``."""
    ab, from_np = _to_torch(f_ab)
    bc, _ = _to_torch(f_bc, ab.dtype)
    if ab.shape != bc.shape:
        raise ValueError(f"flow shapes differ: {tuple(ab.shape)} vs {tuple(bc.shape)}")
    sampled, _ = warp_backward(bc.movedim(-1, -3), ab)
    out = ab + sampled.movedim(-3, -1)
    return out.numpy() if from_np else out
