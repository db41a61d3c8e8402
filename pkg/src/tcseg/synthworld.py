"""Synthetic video world: moving textured shapes with exact labels, flow and occlusion.

Frames are quantized to 8 bits at render time so that PNG persistence is
lossless and ``load_sequence(save_sequence(seq))`` is bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
FLO_MAGIC = 202021.25

# background, then one color per foreground class; classes 1 and 2 differ
# mostly in brightness so global jitter is a real nuisance for a small net
DEFAULT_PALETTE = (
    (0.45, 0.45, 0.45),
    (0.70, 0.35, 0.30),
    (0.80, 0.50, 0.42),
    (0.30, 0.40, 0.70),
    (0.35, 0.65, 0.35),
    (0.65, 0.60, 0.25),
    (0.55, 0.30, 0.60),
    (0.25, 0.60, 0.65),
)


class SequenceFormatError(Exception):
    """Base class for on-disk sequence problems."""


class FlowFormatError(SequenceFormatError):
    pass


class DimensionMismatchError(SequenceFormatError):
    pass


class MissingManifestError(SequenceFormatError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # "rectangle" | "disc"
    class_id: int
    size: float
    start_position: tuple[float, float]
    velocity: tuple[float, float]
    depth: int = 0

    def __post_init__(self):
        if self.kind not in ("rectangle", "disc"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not self.size > 0:
            raise ValueError("shape size must be positive")
        if not all(math.isfinite(c) for c in self.velocity):
            raise ValueError("shape velocity must be finite")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_classes: int
    shapes: tuple[ShapeSpec, ...]
    num_frames: int
    jitter_amplitude: float = 0.0
    labeled_stride: int = 1
    seed: int = 0
    pan: tuple[float, float] = (0.0, 0.0)
    texture_amplitude: float = 0.0
    flow_noise: float = 0.0
    palette: Optional[tuple[tuple[float, float, float], ...]] = None

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError("height and width must be >= 16")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if not 1 <= self.labeled_stride <= self.num_frames:
            raise ValueError("labeled_stride must lie in [1, num_frames]")
        if not 0.0 <= self.jitter_amplitude <= 1.0:
            raise ValueError("jitter_amplitude must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        palette = self.colors()
        if len(palette) < self.num_classes:
            raise ValueError("palette has fewer colors than classes")
        for s in self.shapes:
            if not 1 <= s.class_id <= self.num_classes - 1:
                raise ValueError(f"shape class id {s.class_id} outside [1, {self.num_classes - 1}]")
            if s.size > min(self.height, self.width):
                raise ValueError(f"shape of size {s.size} does not fit a {self.height}x{self.width} grid")

    def colors(self) -> tuple[tuple[float, float, float], ...]:
        return self.palette if self.palette is not None else DEFAULT_PALETTE

    def labeled_indices(self) -> list[int]:
        return list(range(0, self.num_frames, self.labeled_stride))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["shapes"] = tuple(
            ShapeSpec(
                kind=s["kind"],
                class_id=int(s["class_id"]),
                size=s["size"],
                start_position=tuple(s["start_position"]),
                velocity=tuple(s["velocity"]),
                depth=int(s.get("depth", 0)),
            )
            for s in d.get("shapes", ())
        )
        d["pan"] = tuple(d.get("pan", (0.0, 0.0)))
        if d.get("palette") is not None:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


@dataclass(eq=False)
class VideoSequence:
    """Frames are float32 H×W×3 in [0, 1]; flows are float32 H×W×2 holding (u, v).

    ``flows[t]`` maps frame t onto t+1 and ``flows_bwd[t]`` maps frame t+1
    back onto t. ``gt_occlusion[t]`` is 1 where a pixel of frame t is still
    visible at t+1, ``occlusion_bwd[t]`` is the same for frame t+1 looking
    back at t.
    """

    frames: list[np.ndarray]
    labels: list[Optional[np.ndarray]]
    flows: list[np.ndarray]
    gt_occlusion: list[np.ndarray]
    flows_bwd: list[np.ndarray] = field(default_factory=list)
    occlusion_bwd: list[np.ndarray] = field(default_factory=list)
    label_source: list[Optional[str]] = field(default_factory=list)
    num_classes: int = 0
    spec: Optional[SceneSpec] = None

    def __post_init__(self):
        n = len(self.frames)
        if len(self.labels) != n:
            raise ValueError("labels must have one entry per frame")
        if len(self.flows) != max(n - 1, 0) or len(self.gt_occlusion) != len(self.flows):
            raise ValueError("need exactly one flow and occlusion map per adjacent pair")
        if not self.label_source:
            self.label_source = ["gt" if lab is not None else None for lab in self.labels]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]

    def labeled_indices(self, source: Optional[str] = None) -> list[int]:
        return [
            i
            for i, (lab, src) in enumerate(zip(self.labels, self.label_source))
            if lab is not None and (source is None or src == source)
        ]

    def __eq__(self, other):
        if not isinstance(other, VideoSequence):
            return NotImplemented
        if len(self) != len(other) or self.num_classes != other.num_classes:
            return False
        if self.label_source != other.label_source or self.spec != other.spec:
            return False

        def same(xs, ys):
            if len(xs) != len(ys):
                return False
            for x, y in zip(xs, ys):
                if (x is None) != (y is None):
                    return False
                if x is not None and (x.dtype != y.dtype or not np.array_equal(x, y)):
                    return False
            return True

        return (
            same(self.frames, other.frames)
            and same(self.labels, other.labels)
            and same(self.flows, other.flows)
            and same(self.gt_occlusion, other.gt_occlusion)
            and same(self.flows_bwd, other.flows_bwd)
            and same(self.occlusion_bwd, other.occlusion_bwd)
        )


def _shape_positions(shape: ShapeSpec, t: int) -> tuple[float, float]:
    return (
        shape.start_position[0] + shape.velocity[0] * t,
        shape.start_position[1] + shape.velocity[1] * t,
    )


def _coverage(shape: ShapeSpec, t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    px, py = _shape_positions(shape, t)
    if shape.kind == "rectangle":
        return (xs >= px) & (xs < px + shape.size) & (ys >= py) & (ys < py + shape.size)
    r = shape.size / 2.0
    return (xs - px) ** 2 + (ys - py) ** 2 <= r * r


def _texture_params(seed: int, idx: int) -> tuple[float, float, float]:
    rng = np.random.default_rng([seed, 1000 + idx])
    fx, fy = rng.uniform(0.05, 0.2, size=2) * rng.choice([-1.0, 1.0], size=2)
    phase = rng.uniform(0.0, 2 * np.pi)
    return float(fx), float(fy), float(phase)


def _texture(params, lx, ly):
    fx, fy, phase = params
    return np.sin(2 * np.pi * (fx * lx + fy * ly) + phase)


def _draw_order(spec: SceneSpec) -> list[int]:
    # ties in depth resolve by list order, later shapes on top
    return sorted(range(len(spec.shapes)), key=lambda i: (spec.shapes[i].depth, i))


def _owner_maps(spec: SceneSpec, xs, ys) -> list[np.ndarray]:
    """Per frame, draw rank of the topmost shape at every pixel (-1 = background)."""
    order = _draw_order(spec)
    owners = []
    for t in range(spec.num_frames):
        owner = np.full((spec.height, spec.width), -1, dtype=np.int64)
        for rank, i in enumerate(order):
            owner[_coverage(spec.shapes[i], t, xs, ys)] = rank
        owners.append(owner)
    return owners


def _visibility(owner_src, owner_dst, flow) -> np.ndarray:
    h, w = owner_src.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + flow[..., 0]
    dy = ys + flow[..., 1]
    inside = (dx >= 0) & (dx <= w - 1) & (dy >= 0) & (dy <= h - 1)
    ix = np.clip(np.floor(dx + 0.5).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(dy + 0.5).astype(np.int64), 0, h - 1)
    covered_above = owner_dst[iy, ix] > owner_src
    return (inside & ~covered_above).astype(np.uint8)


def render_sequence(spec: SceneSpec) -> VideoSequence:
    """Render ``spec`` deterministically; every output is a pure function of the spec."""
    spec.validate()
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    order = _draw_order(spec)
    colors = np.asarray(spec.colors(), dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    jitter = rng.uniform(-spec.jitter_amplitude, spec.jitter_amplitude, size=spec.num_frames)
    bg_tex = _texture_params(spec.seed, -1)
    shape_tex = [_texture_params(spec.seed, i) for i in range(len(spec.shapes))]
    owners = _owner_maps(spec, xs, ys)

    frames, all_labels, motion = [], [], []
    for t in range(spec.num_frames):
        owner = owners[t]
        label = np.zeros((h, w), dtype=np.uint8)
        tex = _texture(bg_tex, xs - spec.pan[0] * t, ys - spec.pan[1] * t)
        u = np.full((h, w), spec.pan[0], dtype=np.float64)
        v = np.full((h, w), spec.pan[1], dtype=np.float64)
        for rank, i in enumerate(order):
            s = spec.shapes[i]
            m = owner == rank
            if not m.any():
                continue
            px, py = _shape_positions(s, t)
            label[m] = s.class_id
            tex[m] = _texture(shape_tex[i], xs[m] - px, ys[m] - py)
            u[m] = s.velocity[0]
            v[m] = s.velocity[1]
        img = colors[label] + spec.texture_amplitude * tex[..., None] + jitter[t]
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        frames.append(img.astype(np.float32))
        all_labels.append(label)
        motion.append(np.stack([u, v], axis=-1))

    flows, flows_bwd, occ, occ_bwd = [], [], [], []
    for t in range(spec.num_frames - 1):
        fwd = motion[t]
        bwd = -motion[t + 1]
        occ.append(_visibility(owners[t], owners[t + 1], fwd))
        occ_bwd.append(_visibility(owners[t + 1], owners[t], bwd))
        flows.append(fwd.astype(np.float32))
        flows_bwd.append(bwd.astype(np.float32))

    if spec.flow_noise > 0:
        noise_rng = np.random.default_rng([spec.seed, 7])
        flows = [f + noise_rng.normal(0, spec.flow_noise, f.shape).astype(np.float32) for f in flows]
        flows_bwd = [f + noise_rng.normal(0, spec.flow_noise, f.shape).astype(np.float32) for f in flows_bwd]

    labeled = set(spec.labeled_indices())
    labels = [lab if t in labeled else None for t, lab in enumerate(all_labels)]
    return VideoSequence(
        frames=frames,
        labels=labels,
        flows=flows,
        gt_occlusion=occ,
        flows_bwd=flows_bwd,
        occlusion_bwd=occ_bwd,
        num_classes=spec.num_classes,
        spec=spec,
    )


def random_scene(
    rng: np.random.Generator,
    height: int = 64,
    width: int = 64,
    num_classes: int = 4,
    num_frames: int = 10,
    num_shapes: tuple[int, int] = (2, 4),
    size_range: tuple[int, int] = (10, 22),
    max_speed: int = 3,
    jitter_amplitude: float = 0.1,
    texture_amplitude: float = 0.06,
    labeled_stride: int = 5,
) -> SceneSpec:
    """Draw a random scene with integer velocities and positions."""
    shapes = []
    for _ in range(int(rng.integers(num_shapes[0], num_shapes[1] + 1))):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        shapes.append(
            ShapeSpec(
                kind=str(rng.choice(["rectangle", "disc"])),
                class_id=int(rng.integers(1, num_classes)),
                size=size,
                start_position=(int(rng.integers(0, width - size // 2)), int(rng.integers(0, height - size // 2))),
                velocity=(int(rng.integers(-max_speed, max_speed + 1)), int(rng.integers(-max_speed, max_speed + 1))),
                depth=int(rng.integers(0, 3)),
            )
        )
    return SceneSpec(
        height=height,
        width=width,
        num_classes=num_classes,
        shapes=tuple(shapes),
        num_frames=num_frames,
        jitter_amplitude=jitter_amplitude,
        labeled_stride=labeled_stride,
        seed=int(rng.integers(0, 2**31 - 1)),
        texture_amplitude=texture_amplitude,
    )


# ---------------------------------------------------------------- persistence


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionMismatchError(f"{path}: flow must be H×W×2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        flow.tofile(f)


def read_flo(path, expected_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic number {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * w * h:
        raise DimensionMismatchError(f"{path}: header says {w}x{h} but payload is {len(raw) - 12} bytes")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatchError(f"{path}: flow is {h}x{w}, expected {expected_shape[0]}x{expected_shape[1]}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def _read_png(path, expected_shape, mode):
    path = Path(path)
    with Image.open(path) as im:
        if im.mode != mode:
            raise SequenceFormatError(f"{path}: expected image mode {mode}, got {im.mode}")
        arr = np.asarray(im)
    if arr.shape[:2] != tuple(expected_shape):
        raise DimensionMismatchError(f"{path}: image is {arr.shape[0]}x{arr.shape[1]}, expected {expected_shape}")
    return arr


MANIFEST = "manifest.json"


def save_sequence(seq: VideoSequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = seq.shape
    manifest = {
        "format": "tcseg-sequence",
        "version": 1,
        "height": h,
        "width": w,
        "num_frames": len(seq),
        "num_classes": seq.num_classes,
        "seed": seq.spec.seed if seq.spec is not None else None,
        "spec": seq.spec.to_dict() if seq.spec is not None else None,
        "labeled_indices": seq.labeled_indices("gt"),
        "pseudo_indices": seq.labeled_indices("pseudo"),
        "frames": [],
        "labels": {},
        "flows": [],
        "flows_bwd": [],
        "occlusion": [],
        "occlusion_bwd": [],
    }
    for t, frame in enumerate(seq.frames):
        name = f"frame_{t:04d}.png"
        Image.fromarray(np.round(frame * 255.0).astype(np.uint8), mode="RGB").save(d / name)
        manifest["frames"].append(name)
    for t, lab in enumerate(seq.labels):
        if lab is None:
            continue
        prefix = "label" if seq.label_source[t] == "gt" else "pseudo"
        name = f"{prefix}_{t:04d}.png"
        Image.fromarray(lab.astype(np.uint8), mode="L").save(d / name)
        manifest["labels"][str(t)] = name
    for key, maps in (("flows", seq.flows), ("flows_bwd", seq.flows_bwd)):
        for t, flow in enumerate(maps):
            name = f"{key[:-1]}_{t:04d}.flo"
            write_flo(d / name, flow)
            manifest[key].append(name)
    for key, maps in (("occlusion", seq.gt_occlusion), ("occlusion_bwd", seq.occlusion_bwd)):
        for t, occ in enumerate(maps):
            name = f"{key}_{t:04d}.png"
            Image.fromarray(occ.astype(np.uint8), mode="L").save(d / name)
            manifest[key].append(name)
    tmp = d / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(d / MANIFEST)


def load_sequence(directory) -> VideoSequence:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise MissingManifestError(f"{d}: no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    shape = (manifest["height"], manifest["width"])
    n = manifest["num_frames"]
    if len(manifest["frames"]) != n:
        raise DimensionMismatchError(f"{mpath}: lists {len(manifest['frames'])} frames, expected {n}")
    # same float64 division as the renderer, so the round trip is bit-exact
    frames = [(_read_png(d / f, shape, "RGB") / 255.0).astype(np.float32) for f in manifest["frames"]]
    labels: list[Optional[np.ndarray]] = [None] * n
    source: list[Optional[str]] = [None] * n
    pseudo = set(manifest.get("pseudo_indices", []))
    for key, name in manifest["labels"].items():
        t = int(key)
        labels[t] = _read_png(d / name, shape, "L").copy()
        source[t] = "pseudo" if t in pseudo else "gt"
    flows = [read_flo(d / f, shape) for f in manifest["flows"]]
    flows_bwd = [read_flo(d / f, shape) for f in manifest["flows_bwd"]]
    occ = [_read_png(d / f, shape, "L").copy() for f in manifest["occlusion"]]
    occ_bwd = [_read_png(d / f, shape, "L").copy() for f in manifest["occlusion_bwd"]]
    if len(flows) != n - 1 or len(occ) != n - 1:
        raise DimensionMismatchError(f"{mpath}: expected {n - 1} flows and occlusion maps")
    spec = SceneSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return VideoSequence(
        frames=frames,
        labels=labels,
        flows=flows,
        gt_occlusion=occ,
        flows_bwd=flows_bwd,
        occlusion_bwd=occ_bwd,
        label_source=source,
        num_classes=manifest["num_classes"],
        spec=spec,
    )


def from_images(images: Sequence[np.ndarray], labels: Sequence[np.ndarray], num_classes: int) -> list[VideoSequence]:
    """Wrap isolated labeled images as one-frame sequences (no temporal pairs)."""
    return [
        VideoSequence(frames=[np.asarray(img, dtype=np.float32)], labels=[np.asarray(lab, dtype=np.uint8)],
                      flows=[], gt_occlusion=[], num_classes=num_classes)
        for img, lab in zip(images, labels)
    ]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Recipe for a train/test split of random scenes."""

    num_train: int = 20
    num_test: int = 24
    height: int = 64
    width: int = 64
    num_classes: int = 4
    num_frames: int = 10
    labeled_stride: int = 5
    jitter_amplitude: float = 0.1
    texture_amplitude: float = 0.06
    max_speed: int = 3
    seed: int = 2024

    def to_dict(self) -> dict:
        return asdict(self)


def make_benchmark(spec: BenchmarkSpec = BenchmarkSpec()) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """Train sequences labeled every ``labeled_stride`` frames; test sequences labeled on every frame."""
    rng = np.random.default_rng(spec.seed)
    common = dict(height=spec.height, width=spec.width, num_classes=spec.num_classes, num_frames=spec.num_frames,
                  jitter_amplitude=spec.jitter_amplitude, texture_amplitude=spec.texture_amplitude,
                  max_speed=spec.max_speed)
    train = [render_sequence(random_scene(rng, labeled_stride=spec.labeled_stride, **common))
             for _ in range(spec.num_train)]
    test = [render_sequence(random_scene(rng, labeled_stride=1, **common)) for _ in range(spec.num_test)]
    return train, test
