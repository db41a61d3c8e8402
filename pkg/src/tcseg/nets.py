"""Per-frame segmentation nets, the ConvLSTM unit and the embedding head for MF distillation."""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_MAGIC = b"TCSGCKPT"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    width: int = 8
    depth: int = 4
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.width < 2 or self.depth < 2:
            raise ValueError("width and depth must be >= 2")

    @classmethod
    def teacher(cls, num_classes=4, seed=0):
        return cls(width=32, depth=4, num_classes=num_classes, seed=seed)

    @classmethod
    def student(cls, num_classes=4, seed=0):
        return cls(width=8, depth=4, num_classes=num_classes, seed=seed)


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """conv blocks with one stride-2 stage, 1×1 classifier, bilinear upsampling of logits."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            w = config.width
            blocks = [_block(3, w), _block(w, w, stride=2)]
            blocks += [_block(w, w) for _ in range(config.depth - 2)]
            self.body = nn.Sequential(*blocks)
            self.classifier = nn.Conv2d(w, config.num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"input size {h}x{w} must be divisible by 2")
        feature = self.body(x)
        logits = F.interpolate(self.classifier(feature), size=(h, w), mode="bilinear", align_corners=False)
        return logits, feature


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int = 1, hidden_channels: int = 4, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, kernel_size,
                               padding=kernel_size // 2)

    def init_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden_channels, h, w)
        return z, z

    def forward(self, x, state=None):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected input [B,{self.in_channels},H,W], got {tuple(x.shape)}")
        hidden, cell = self.init_state(x) if state is None else state
        if hidden.shape[0] != x.shape[0] or hidden.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"state {tuple(hidden.shape)} does not match input {tuple(x.shape)}")
        i, f, o, g = self.gates(torch.cat([x, hidden], dim=1)).chunk(4, dim=1)
        cell = torch.sigmoid(f) * cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return (hidden, cell), hidden


def convlstm_step(cell: ConvLSTMCell, state, input_map):
    """One ConvLSTM update; returns ``(new_state, output)`` with output = new hidden."""
    return cell(input_map, state)


class SequenceEmbedder(nn.Module):
    """ConvLSTM over per-frame self-similarity maps, then GAP and a linear projection.

    Shared by the teacher and student paths; only the student path updates it.
    """

    def __init__(self, hidden_channels: int = 4, spatial: int = 16, embed_dim: int = 16, seed: int = 0,
                 clip: float = 1.0):
        super().__init__()
        self.spatial = spatial
        self.clip = clip
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.cell = ConvLSTMCell(1, hidden_channels)
            self.proj = nn.Linear(hidden_channels, embed_dim)
        self.clip_()

    def _as_input(self, sim):
        # [B,N,N] similarity map -> single-channel image pooled to spatial×spatial
        x = sim.unsqueeze(1) if sim.dim() == 3 else sim
        if x.shape[-1] != self.spatial or x.shape[-2] != self.spatial:
            x = F.adaptive_avg_pool2d(x, self.spatial)
        return x

    def forward(self, maps):
        if len(maps) == 0:
            raise ValueError("embed_sequence needs at least one map")
        shape = maps[0].shape
        state = None
        for m in maps:
            if m.shape != shape:
                raise ValueError("all maps in a sequence must share one shape")
            state, out = self.cell(self._as_input(m), state)
        return self.proj(out.mean(dim=(-2, -1)))

    @torch.no_grad()
    def clip_(self):
        for p in self.parameters():
            p.clamp_(-self.clip, self.clip)


def embed_sequence(embedder: SequenceEmbedder, maps):
    return embedder(maps)


# ---------------------------------------------------------------- checkpoints


def _config_dict(module) -> dict:
    if isinstance(module, SegNet):
        return {"kind": "segnet", **asdict(module.config)}
    if isinstance(module, SequenceEmbedder):
        return {
            "kind": "embedder",
            "hidden_channels": module.cell.hidden_channels,
            "spatial": module.spatial,
            "embed_dim": module.proj.out_features,
            "clip": module.clip,
        }
    raise TypeError(f"cannot checkpoint {type(module).__name__}")


def checkpoint_bytes(modules: dict, extra: dict | None = None) -> bytes:
    """Deterministic blob: magic, version, JSON header, raw little-endian arrays."""
    header = {"modules": {}, "extra": extra or {}}
    payload = io.BytesIO()
    for name, module in modules.items():
        entries = []
        for key, t in module.state_dict().items():
            arr = t.detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"))
            entries.append({"name": key, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": payload.tell(), "nbytes": arr.nbytes})
            payload.write(arr.tobytes())
        header["modules"][name] = {"config": _config_dict(module), "params": entries}
    hdr = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr + payload.getvalue()


def save_checkpoint(path, modules: dict, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(modules, extra))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(CKPT_MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    return header["modules"], header["extra"], raw[start + hlen:]


def build_module(config: dict):
    config = dict(config)
    kind = config.pop("kind")
    if kind == "segnet":
        return SegNet(SegNetConfig(**config))
    if kind == "embedder":
        return SequenceEmbedder(**config)
    raise CheckpointError(f"unknown module kind {kind!r}")


def load_into(module, entry: dict, payload: bytes) -> None:
    if entry["config"] != _config_dict(module):
        raise CheckpointError(f"config mismatch: checkpoint has {entry['config']}, module has {_config_dict(module)}")
    state = {}
    for p in entry["params"]:
        arr = np.frombuffer(payload, dtype=np.dtype(p["dtype"]), count=int(np.prod(p["shape"], dtype=np.int64)),
                            offset=p["offset"]).reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    module.load_state_dict(state)


def load_checkpoint(path, expected: dict | None = None) -> tuple[dict, dict]:
    """Rebuild every module in the checkpoint.

    ``expected`` maps module name to a config dict (or module); any mismatch
    raises :class:`CheckpointError`.
    """
    entries, extra, payload = read_checkpoint(path)
    modules = {}
    for name, entry in entries.items():
        if expected is not None and name in expected:
            want = expected[name]
            want = _config_dict(want) if isinstance(want, nn.Module) else want
            if want != entry["config"]:
                raise CheckpointError(f"{path}: module {name!r} config {entry['config']} != expected {want}")
        module = build_module(entry["config"])
        load_into(module, entry, payload)
        modules[name] = module
    return modules, extra
