"""Command-line entry point: data generation, teacher/student training, pseudo-labeling, evaluation, ablation."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .evalkit import MetricReport, ablation_table, evaluate_model, read_subset, write_subset
from .losses import Switches
from .nets import CheckpointError, SegNet, SequenceEmbedder, load_checkpoint, save_checkpoint
from .pipeline import (
    PipelineConfigError,
    TrainConfig,
    apply_pseudo_labels,
    generate_pseudo_labels,
    train_student,
    train_teacher,
    write_log,
)
from .synthworld import BenchmarkSpec, SequenceFormatError, load_sequence, make_benchmark, save_sequence

log = logging.getLogger("tcseg")

OUT_ENV = "TCSEG_OUT"

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_HASH = 5
EXIT_FORMAT = 6
EXIT_CONFLICT = 7

DATASET_FILE = "dataset.json"
MANIFEST_FILE = "manifest.json"
SUBSET_FILE = "eval_subset.txt"


class ConfigError(ValueError):
    pass


class HashMismatch(RuntimeError):
    pass


class OutputConflict(RuntimeError):
    pass


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = BenchmarkSpec()
    teacher: TrainConfig = TrainConfig()
    student: TrainConfig = TrainConfig()
    schemes: tuple = ("a", "b", "c", "d", "e", "f", "j", "k", "l")
    subset_size: Optional[int] = None  # None: every test sequence

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "schemes": list(self.schemes),
            "subset_size": self.subset_size,
        }

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            bench = d.get("benchmark") or {}
            bad = set(bench) - {f.name for f in fields(BenchmarkSpec)}
            if bad:
                raise ConfigError(f"unknown benchmark options: {sorted(bad)}")
            schemes = tuple(d.get("schemes", cls.schemes))
            for s in schemes:
                Switches.scheme(s)
            size = d.get("subset_size")
            if size is not None and int(size) < 1:
                raise ConfigError("subset_size must be positive")
            return cls(
                benchmark=BenchmarkSpec(**bench),
                teacher=TrainConfig.from_dict(d.get("teacher") or {}),
                student=TrainConfig.from_dict(d.get("student") or {}),
                schemes=schemes,
                subset_size=None if size is None else int(size),
            )
        except (PipelineConfigError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        return replace(self, teacher=replace(self.teacher, seed=seed), student=replace(self.student, seed=seed))


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def parse_switches(scheme: str, overrides) -> Switches:
    try:
        sw = Switches.scheme(scheme)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for item in overrides or []:
        name, _, value = item.partition("=")
        if name not in ("tl", "pf", "mf", "pl") or value not in ("on", "off"):
            raise ConfigError(f"bad switch {item!r}; expected tl|pf|mf|pl=on|off")
        sw = replace(sw, **{name: value == "on"})
    return sw


# -------------------------------------------------------------------- dataset


def _hash_files(root: Path, skip=(DATASET_FILE, MANIFEST_FILE)) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip and not p.name.endswith(".tmp"):
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def save_dataset(root, train, test, subset, extra: Optional[dict] = None) -> str:
    root = Path(root)
    names = {"train": [], "test": []}
    for split, seqs in (("train", train), ("test", test)):
        for i, seq in enumerate(seqs):
            rel = f"{split}/seq_{i:03d}"
            save_sequence(seq, root / rel)
            names[split].append(rel)
    write_subset(root / SUBSET_FILE, subset)
    digest = _hash_files(root)
    meta = {"format": "tcseg-dataset", "version": 1, "hash": digest, **names, "subset": SUBSET_FILE, **(extra or {})}
    _write_json(root / DATASET_FILE, meta)
    return digest


@dataclass
class Dataset:
    root: Path
    train: list
    test: list
    subset: list
    hash: str
    meta: dict = field(default_factory=dict)


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / DATASET_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"{root}: no {DATASET_FILE}; run gen-data first")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{meta_path}: {exc}") from exc
    digest = _hash_files(root)
    if digest != meta.get("hash"):
        raise HashMismatch(f"{root}: content hash {digest[:12]} does not match recorded {str(meta.get('hash'))[:12]}")
    train = [load_sequence(root / rel) for rel in meta["train"]]
    test = [load_sequence(root / rel) for rel in meta["test"]]
    subset = read_subset(root / meta["subset"])
    if any(not 0 <= i < len(test) for i in subset):
        raise SequenceFormatError(f"{root}: evaluation subset refers to missing test sequences")
    return Dataset(root, train, test, subset, digest, meta)


def choose_subset(num_test: int, size: Optional[int], seed: int) -> list[int]:
    if size is None or size >= num_test:
        return list(range(num_test))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(num_test, size=size, replace=False))


# ------------------------------------------------------------------- manifest


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def resolve_out(out) -> Path:
    p = Path(out)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def experiment_id(command: str, config: dict, dataset_hash: Optional[str], seeds: dict, inputs: dict) -> str:
    blob = json.dumps({"command": command, "config": config, "data": dataset_hash, "seeds": seeds,
                       "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def claim_output(out: Path, exp_id: str) -> None:
    """Refuse to reuse a directory that holds a different experiment."""
    out.mkdir(parents=True, exist_ok=True)
    existing = out / MANIFEST_FILE
    if existing.is_file():
        try:
            old = json.loads(existing.read_text()).get("id")
        except json.JSONDecodeError:
            old = None
        if old != exp_id:
            raise OutputConflict(f"{out} already holds experiment {old}; choose another --out")


def write_manifest(out: Path, exp_id: str, command: str, config: dict, dataset_hash, seeds: dict, inputs: dict,
                   outputs: list[str]) -> Path:
    missing = [o for o in outputs if not (out / o).exists()]
    if missing:
        raise FileNotFoundError(f"outputs not written: {missing}")
    manifest = {
        "id": exp_id,
        "command": command,
        "config": config,
        "dataset_hash": dataset_hash,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seeds": seeds,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _write_json(out / MANIFEST_FILE, manifest)
    return out / MANIFEST_FILE


# ---------------------------------------------------------------------- plots


def plot_tc_curves(report: MetricReport, path: Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    for sid, curve in sorted(report.per_pair_tc.items()):
        ax.plot(np.arange(1, len(curve) + 1), curve, lw=1, alpha=0.7, label=f"seq {sid}")
    ax.set_xlabel("frame pair (t-1, t)")
    ax.set_ylabel("warped IoU")
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    if len(report.per_pair_tc) <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_ablation(rows: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(rows)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1 + 0.7 * len(names), 3))
    ax.bar(x - 0.2, [100 * rows[n]["miou"] for n in names], 0.4, label="mIoU")
    ax.bar(x + 0.2, [100 * rows[n]["tc"] for n in names], 0.4, label="TC")
    lo = min(min(100 * r["miou"], 100 * r["tc"]) for r in rows.values())
    ax.set_ylim(max(0, lo - 5), 100)
    ax.set_xticks(x, names)
    ax.set_xlabel("scheme")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _write_report(out: Path, report: MetricReport, stem: str, title: str = "") -> list[str]:
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.txt").write_text(report.per_class_table() + "\n")
    plot_tc_curves(report, out / f"{stem}_tc.png", title)
    return [f"{stem}.csv", f"{stem}.txt", f"{stem}_tc.png"]


# ------------------------------------------------------------------- commands


def _load_teacher(path) -> SegNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    modules, _ = load_checkpoint(path)
    net = modules.get("teacher") or next((m for m in modules.values() if isinstance(m, SegNet)), None)
    if net is None:
        raise CheckpointError(f"{path}: holds no segmentation network")
    return net.eval()


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.benchmark if args.seed is None else replace(cfg.benchmark, seed=args.seed)
    out = resolve_out(args.out)
    seeds = {"benchmark": spec.seed}
    config = {"benchmark": spec.to_dict(), "subset_size": cfg.subset_size}
    exp = experiment_id("gen-data", config, None, seeds, {})
    claim_output(out, exp)
    train, test = make_benchmark(spec)
    subset = choose_subset(len(test), cfg.subset_size, spec.seed)
    digest = save_dataset(out, train, test, subset, {"benchmark": spec.to_dict()})
    write_manifest(out, exp, "gen-data", config, digest, seeds, {}, [DATASET_FILE, SUBSET_FILE])
    print(f"dataset {digest[:12]}: {len(train)} train / {len(test)} test sequences -> {out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    sw = parse_switches("e", args.switch)
    if sw.pf or sw.mf or sw.pl:
        raise ConfigError("the teacher accepts only the tl switch")
    data = load_dataset(args.data)
    out = resolve_out(args.out)
    config = {"teacher": cfg.teacher.to_dict(), "tl": sw.tl}
    seeds = {"train": cfg.teacher.seed}
    exp = experiment_id("train-teacher", config, data.hash, seeds, {})
    claim_output(out, exp)
    res = train_teacher(data.train, cfg.teacher, use_tl=sw.tl)
    save_checkpoint(out / "teacher.ckpt", {"teacher": res.net}, {"tl": sw.tl, "dataset_hash": data.hash})
    (out / "teacher_log.csv").unlink(missing_ok=True)
    write_log(out / "teacher_log.csv", res.log)
    write_manifest(out, exp, "train-teacher", config, data.hash, seeds, {"data": str(data.root)},
                   ["teacher.ckpt", "teacher_log.csv"])
    print(f"teacher (tl={'on' if sw.tl else 'off'}) -> {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset(args.data)
    teacher = _load_teacher(args.teacher)
    out = resolve_out(args.out)
    tr = cfg.student
    config = {"tta_scales": list(tr.tta_scales), "tta_flip": tr.tta_flip, "threshold": tr.pseudo_threshold}
    teacher_hash = hashlib.sha256(Path(args.teacher).read_bytes()).hexdigest()
    exp = experiment_id("pseudo-label", config, data.hash, {}, {"teacher": teacher_hash})
    claim_output(out, exp)
    pseudo = generate_pseudo_labels(teacher, data.train, tr.tta_scales, tr.tta_flip, tr.pseudo_threshold)
    train = apply_pseudo_labels(data.train, pseudo)
    digest = save_dataset(out, train, data.test, data.subset,
                          {"parent_hash": data.hash, "teacher_sha256": teacher_hash,
                           **({"benchmark": data.meta["benchmark"]} if "benchmark" in data.meta else {})})
    write_manifest(out, exp, "pseudo-label", config, digest, {},
                   {"data": str(data.root), "teacher": str(args.teacher)}, [DATASET_FILE, SUBSET_FILE])
    print(f"{len(pseudo)} pseudo-labeled frames; dataset {digest[:12]} -> {out}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    sw = parse_switches(args.scheme, args.switch)
    data = load_dataset(args.data)
    teacher = _load_teacher(args.teacher) if args.teacher else None
    if (sw.pf or sw.mf) and teacher is None:
        raise ConfigError("PF/MF distillation needs --teacher")
    if sw.pl and not any(s.labeled_indices("pseudo") for s in data.train):
        raise ConfigError("pl=on needs a pseudo-labeled dataset; run pseudo-label first")
    out = resolve_out(args.out)
    config = {"student": cfg.student.to_dict(), "switches": _switch_dict(sw)}
    seeds = {"train": cfg.student.seed}
    inputs = {"teacher": hashlib.sha256(Path(args.teacher).read_bytes()).hexdigest()} if args.teacher else {}
    exp = experiment_id("train-student", config, data.hash, seeds, inputs)
    claim_output(out, exp)
    res = train_student(data.train, teacher, cfg.student, sw)
    mods = {"student": res.net}
    if res.embedder is not None:
        mods["embedder"] = res.embedder
    save_checkpoint(out / "student.ckpt", mods, {"switches": _switch_dict(sw), "dataset_hash": data.hash})
    (out / "student_log.csv").unlink(missing_ok=True)
    write_log(out / "student_log.csv", res.log)
    write_manifest(out, exp, "train-student", config, data.hash, seeds,
                   {"data": str(data.root), **({"teacher": str(args.teacher)} if args.teacher else {})},
                   ["student.ckpt", "student_log.csv"])
    print(f"student ({_switch_text(sw)}) -> {out / 'student.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    data = load_dataset(args.data)
    modules, _ = load_checkpoint(ckpt)
    net = modules.get(args.module)
    if not isinstance(net, SegNet):
        raise CheckpointError(f"{ckpt}: no segmentation network named {args.module!r}")
    out = resolve_out(args.out)
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    exp = experiment_id("evaluate", {"module": args.module}, data.hash, {}, {"checkpoint": digest})
    claim_output(out, exp)
    report = evaluate_model(net, data.test, data.subset)
    written = _write_report(out, report, "report", ckpt.stem)
    write_subset(out / SUBSET_FILE, data.subset)
    write_manifest(out, exp, "evaluate", {"module": args.module}, data.hash, {},
                   {"data": str(data.root), "checkpoint": str(ckpt)}, written + [SUBSET_FILE])
    s = report.summary()
    print(f"mIoU {100 * s['miou']:.2f}  pixel acc {100 * s['pixel_accuracy']:.2f}  TC {100 * s['tc']:.2f}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    schemes = tuple(args.scheme.split(",")) if args.scheme else cfg.schemes
    for s in schemes:
        parse_switches(s, [])
    data = load_dataset(args.data)
    out = resolve_out(args.out)
    config = {**cfg.to_dict(), "schemes": list(schemes)}
    seeds = {"teacher": cfg.teacher.seed, "student": cfg.student.seed}
    inputs = {"teacher": hashlib.sha256(Path(args.teacher).read_bytes()).hexdigest()} if args.teacher else {}
    exp = experiment_id("ablation", config, data.hash, seeds, inputs)
    claim_output(out, exp)
    written = []
    if args.teacher:
        teacher = _load_teacher(args.teacher)
    else:
        res = train_teacher(data.train, cfg.teacher, use_tl=True)
        teacher = res.net
        save_checkpoint(out / "teacher.ckpt", {"teacher": teacher}, {"tl": True, "dataset_hash": data.hash})
        (out / "teacher_log.csv").unlink(missing_ok=True)
        write_log(out / "teacher_log.csv", res.log)
        written += ["teacher.ckpt", "teacher_log.csv"]
    train = data.train
    if any(Switches.scheme(s).pl for s in schemes):
        st = cfg.student
        pseudo = generate_pseudo_labels(teacher, data.train, st.tta_scales, st.tta_flip, st.pseudo_threshold)
        train = apply_pseudo_labels(data.train, pseudo)
    rows = {}
    for s in schemes:
        sw = Switches.scheme(s)
        res = train_student(train, teacher, cfg.student, sw)
        mods = {"student": res.net, **({"embedder": res.embedder} if res.embedder is not None else {})}
        save_checkpoint(out / f"student_{s}.ckpt", mods, {"switches": _switch_dict(sw), "dataset_hash": data.hash})
        (out / f"student_{s}_log.csv").unlink(missing_ok=True)
        write_log(out / f"student_{s}_log.csv", res.log)
        report = evaluate_model(res.net, data.test, data.subset)
        written += [f"student_{s}.ckpt", f"student_{s}_log.csv"] + _write_report(out, report, f"report_{s}",
                                                                                  f"scheme {s}")
        rows[s] = report.summary()
        log.info("scheme %s: %s", s, rows[s])
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    lines = ["scheme,tl,pf,mf,pl,miou,pixel_accuracy,tc"]
    for s, r in rows.items():
        sw = Switches.scheme(s)
        flags = ",".join(str(int(v)) for v in (sw.tl, sw.pf, sw.mf, sw.pl))
        lines.append(f"{s},{flags},{r['miou']:.6f},{r['pixel_accuracy']:.6f},{r['tc']:.6f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    plot_ablation(rows, out / "ablation.png")
    write_subset(out / SUBSET_FILE, data.subset)
    written += ["ablation.txt", "ablation.csv", "ablation.png", SUBSET_FILE]
    write_manifest(out, exp, "ablation", config, data.hash, seeds,
                   {"data": str(data.root), **({"teacher": str(args.teacher)} if args.teacher else {})}, written)
    print(table)
    return EXIT_OK


def _switch_dict(sw: Switches) -> dict:
    return {"tl": sw.tl, "pf": sw.pf, "mf": sw.mf, "pl": sw.pl}


def _switch_text(sw: Switches) -> str:
    on = [k for k, v in _switch_dict(sw).items() if v]
    return "+".join(on) if on else "ce only"


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="experiment YAML")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--out", required=True, help=f"output directory (relative paths resolve under ${OUT_ENV})")
        if seed:
            sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("gen-data", help="render the synthetic benchmark")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-teacher", help="train the teacher (temporal loss on by default)")
    common(sp)
    sp.add_argument("--switch", action="append", metavar="tl=on|off")
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("pseudo-label", help="label unlabeled training frames with the teacher")
    common(sp, seed=False)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.set_defaults(func=cmd_pseudo_label)

    sp = sub.add_parser("train-student", help="train a student under one scheme")
    common(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (needed for pf/mf)")
    sp.add_argument("--scheme", default="a", help="ablation scheme a,b,c,d,e,f,j,k,l")
    sp.add_argument("--switch", action="append", metavar="NAME=on|off", help="override one loss term")
    sp.set_defaults(func=cmd_train_student)

    sp = sub.add_parser("evaluate", help="mIoU, pixel accuracy and TC on the test split")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--module", default="student", help="network name inside the checkpoint")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablation", help="train and evaluate a list of schemes")
    common(sp)
    sp.add_argument("--teacher", help="reuse a teacher checkpoint instead of training one")
    sp.add_argument("--scheme", help="comma-separated schemes (default: from config)")
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (SequenceFormatError, CheckpointError) as exc:
        print(f"error: bad file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OutputConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT


if __name__ == "__main__":
    sys.exit(main())
