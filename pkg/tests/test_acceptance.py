"""Acceptance checks, one test per criterion; each records a PASS/FAIL line shown in the run summary.

The training ladder (criteria 6, 7, 9) runs the reference recipe in
configs/reference.yaml for seeds 0, 1, 2 and takes roughly a quarter of an
hour on one CPU core. Set TCSEG_RECORD=<path> to dump its raw numbers.
"""
import json
import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import stats

from tcseg.cli import load_config
from tcseg.evalkit import evaluate_model, miou, read_subset, tc_sequence
from tcseg.losses import (
    LossWeights,
    Switches,
    TripletBatch,
    at_operator,
    combined_loss,
    mf_loss,
    normalize_embedding,
    pf_loss,
    self_similarity,
    temporal_loss,
)
from tcseg.nets import SegNet, SegNetConfig, SequenceEmbedder, checkpoint_bytes
from tcseg.pipeline import (
    MixedSampler,
    TrainConfig,
    apply_pseudo_labels,
    generate_pseudo_labels,
    run_pipeline,
    sample_triplet,
    train_student,
    train_teacher,
)
from tcseg.synthworld import BenchmarkSpec, make_benchmark, random_scene, render_sequence
from tcseg.warpcore import warp_backward

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2)


def shift_oracle(src, flow):
    """out[c, y, x] = src[c, clamp(y + v), clamp(x + u)] for integer per-pixel flow."""
    c, h, w = src.shape
    out = np.empty_like(src)
    valid = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            sx, sy = x + int(flow[y, x, 0]), y + int(flow[y, x, 1])
            valid[y, x] = 0 <= sx < w and 0 <= sy < h
            out[:, y, x] = src[:, min(max(sy, 0), h - 1), min(max(sx, 0), w - 1)]
    return out, valid


def test_criterion_1_warp_oracle(verdict):
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst_nearest, worst_bilinear, valid_ok = 0.0, 0.0, True
    for _ in range(100):
        src = rng.random((3, 8, 8))
        flow = rng.integers(-4, 5, size=(8, 8, 2)).astype(np.float64)
        expect, expect_valid = shift_oracle(src, flow)
        near, v1 = warp_backward(src, flow, mode="nearest")
        bil, v2 = warp_backward(src, flow, mode="bilinear")
        worst_nearest = max(worst_nearest, float(np.abs(near - expect).max()))
        worst_bilinear = max(worst_bilinear, float(np.abs(bil - expect).max()))
        valid_ok &= np.array_equal(v1, expect_valid) and np.array_equal(v2, expect_valid)
    elapsed = time.perf_counter() - t0
    ok = worst_nearest == 0.0 and worst_bilinear <= 1e-6 and valid_ok and elapsed < 10
    verdict("1 warp oracle", ok, f"nearest max err {worst_nearest:.1e}, bilinear {worst_bilinear:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_at_oracle(verdict):
    rng = np.random.default_rng(200)
    worst = 0.0
    for _ in range(100):
        n, c = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        x1, x2 = rng.normal(size=(2, n, c))
        x1[rng.random(n) < 0.1] = 0  # exercise the zero-norm rule
        expect = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                na, nb = math.sqrt(sum(v * v for v in x1[i])), math.sqrt(sum(v * v for v in x2[j]))
                if na > 0 and nb > 0:
                    expect[i, j] = sum(a * b for a, b in zip(x1[i], x2[j])) / (na * nb)
        got = at_operator(torch.tensor(x1), torch.tensor(x2)).numpy()
        worst = max(worst, float(np.abs(got - expect).max()))
    ok = worst <= 1e-6
    verdict("2 AT oracle", ok, f"max err {worst:.1e}")
    assert ok


def _fd_rel_error(fn, x, eps=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    ana = x.grad.detach().clone()
    num = torch.zeros_like(x)
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        hi, lo = flat.clone(), flat.clone()
        hi[i] += eps
        lo[i] -= eps
        num.view(-1)[i] = (fn(hi.view_as(x)) - fn(lo.view_as(x))) / (2 * eps)
    return float((ana - num).norm() / num.norm().clamp_min(1e-12))


def test_criterion_3_gradient_checks(verdict):
    worst = {"temporal_loss": 0.0, "pf_loss": 0.0, "mf_loss": 0.0}
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
        logits_t, logits_tk = rnd(1, 2, 4, 4), rnd(1, 2, 4, 4)
        flow = torch.rand(1, 4, 4, 2, generator=g, dtype=torch.float64) * 3 - 1.5
        img_t = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
        img_tk = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
        q_tk = logits_tk.softmax(1)
        worst["temporal_loss"] = max(worst["temporal_loss"], _fd_rel_error(
            lambda z: temporal_loss(z.softmax(1), q_tk, flow, img_t, img_tk), logits_t))

        t1, t2 = rnd(1, 2, 4, 4).softmax(1), rnd(1, 2, 4, 4).softmax(1)
        other = rnd(1, 2, 4, 4).softmax(1)
        worst["pf_loss"] = max(worst["pf_loss"], _fd_rel_error(
            lambda z: pf_loss(z.softmax(1), other, t1, t2), logits_t))

        e_t = normalize_embedding(rnd(1, 16))
        worst["mf_loss"] = max(worst["mf_loss"], _fd_rel_error(lambda z: mf_loss(z, e_t), rnd(1, 16)))
    ok = all(v < 1e-3 for v in worst.values())
    verdict("3 gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_4_fixed_points(verdict):
    g = torch.Generator().manual_seed(4)
    frame = torch.rand(2, 3, 16, 16, generator=g)
    q = torch.randn(2, 4, 16, 16, generator=g).softmax(1)
    tl = temporal_loss(q, q, torch.zeros(2, 16, 16, 2), frame, frame).item()
    qs, qt = torch.randn(2, 2, 4, 16, 16, generator=g).softmax(2)
    pf = pf_loss(qs, qt, qs, qt).item()
    e = normalize_embedding(torch.randn(2, 16, generator=g))
    mf = mf_loss(e, e).item()

    labels = torch.randint(0, 4, (2, 16, 16), generator=g)
    batch = TripletBatch((frame, frame.flip(-1), frame.flip(-2)), (labels, labels, labels),
                         torch.rand(2, 16, 16, 2, generator=g))
    student = SegNet(SegNetConfig(width=4, num_classes=4, seed=1))
    teacher = SegNet(SegNetConfig(width=6, num_classes=4, seed=2)).eval()
    total, br = combined_loss(batch, student, teacher, SequenceEmbedder(seed=3), LossWeights(lambda_reg=0.0),
                              Switches(tl=True, pf=True, mf=True))
    ce_sum = sum(F.cross_entropy(student(batch.frames[p])[0], labels).item() for p in range(3))
    reduces = float(total.detach()) == br["ce"] and abs(br["ce"] - ce_sum) < 1e-5
    ok = tl == 0.0 and pf == 0.0 and mf == 0.0 and reduces
    verdict("4 fixed points", ok, f"tl {tl}, pf {pf}, mf {mf}, lambda=0 gives sum of ce: {reduces}")
    assert ok


class _Constant(torch.nn.Module):
    def forward(self, x):
        logits = torch.zeros(x.shape[0], 4, *x.shape[2:])
        logits[:, 0] = 1
        return logits, None


def test_criterion_5_metric_sanity(verdict):
    rng = np.random.default_rng(5)
    seqs = [render_sequence(random_scene(rng, labeled_stride=1)) for _ in range(10)]
    oracle = [tc_sequence(s.labels, s.flows_bwd, s.occlusion_bwd)[0] for s in seqs]
    const = evaluate_model(_Constant(), seqs, list(range(len(seqs))))
    m, _, _ = miou([np.array([[1, 1], [0, 0]])], [np.array([[1, 0], [0, 0]])], 2)
    ok = all(v == 1.0 for v in oracle) and const.tc == 1.0 and const.miou < 1 and m == 7 / 12
    verdict("5 metric sanity", ok, f"oracle tc {min(oracle)}, constant tc {const.tc} (miou {const.miou:.3f}), "
                                   f"2x2 miou {m!r}")
    assert ok


def test_criterion_8_pipeline_plumbing(verdict):
    train, _ = make_benchmark(BenchmarkSpec(num_train=4, num_test=1, height=32, width=32, num_frames=6,
                                            labeled_stride=3))
    cfg = TrainConfig(epochs=1, steps_per_epoch=4, batch_size=4, seed=8)
    first = run_pipeline(train, cfg, Switches.scheme("l"))
    second = run_pipeline(train, cfg, Switches.scheme("l"))

    merged = apply_pseudo_labels(train, first.pseudo)
    gt_kept = all(np.array_equal(m.labels[t], s.labels[t]) and m.label_source[t] == "gt"
                  for s, m in zip(train, merged) for t in s.labeled_indices("gt"))
    gt_skipped = not any((sid, t) in first.pseudo.labels
                         for sid, s in enumerate(train) for t in s.labeled_indices("gt"))

    teacher_before = checkpoint_bytes({"t": first.teacher})
    train_student(merged, first.teacher, cfg, Switches.scheme("l"))
    frozen = checkpoint_bytes({"t": first.teacher}) == teacher_before

    blob = lambda r: checkpoint_bytes({"t": r.teacher, "s": r.student, "e": r.embedder})
    same_pseudo = all(np.array_equal(first.pseudo.labels[k], second.pseudo.labels[k]) for k in first.pseudo.labels)
    reproducible = blob(first) == blob(second) and same_pseudo and first.student_log == second.student_log
    ok = gt_kept and gt_skipped and frozen and reproducible
    verdict("8 pipeline plumbing", ok, f"gt untouched {gt_kept and gt_skipped}, teacher frozen {frozen}, "
                                       f"bit-reproducible {reproducible}")
    assert ok


def test_criterion_10_statistics(verdict):
    rng = np.random.default_rng(10)
    draws = np.array([sample_triplet(10, 6, 4, rng).frame_f for _ in range(10_000)])
    counts = np.bincount(draws, minlength=10)[2:6]
    p = stats.chisquare(counts).pvalue
    sampler = MixedSampler(["gt"], ["pseudo"], 1.0, np.random.default_rng(11))
    frac = sum(sampler.draw()[1] == "pseudo" for _ in range(10_000)) / 10_000
    ok = counts.sum() == 10_000 and p > 0.01 and abs(frac - 0.5) <= 0.02
    verdict("10 statistics", ok, f"frame_f chi2 p={p:.3f}, pseudo fraction {frac:.4f} (target 0.5)")
    assert ok


# ------------------------------------------------------------- training ladder


def _embedding_norms(res, teacher, data, cfg):
    """‖E^T‖ and ‖E^S‖ on the first training triplet of every sequence."""
    rng = np.random.default_rng(0)
    triplets = [sample_triplet(len(s), s.labeled_indices("gt")[1], cfg.window, rng) for s in data]
    stack = lambda pos: torch.stack([torch.from_numpy(s.frames[getattr(tr, pos)]).permute(2, 0, 1)
                                     for s, tr in zip(data, triplets)])
    frames = [stack(p) for p in ("frame_f", "frame_c", "frame_b")]
    diag = Counter()
    with torch.no_grad():
        e_t = normalize_embedding(res.embedder([self_similarity(teacher(f)[1], diag) for f in frames]))
        e_s = res.embedder([self_similarity(res.net(f)[1], diag) for f in frames])
    return e_t.norm(dim=1), e_s.norm(dim=1)


@pytest.fixture(scope="module")
def ladder():
    cfg = load_config(ROOT / "configs" / "reference.yaml")
    train, test = make_benchmark(cfg.benchmark)
    ids = read_subset(ROOT / "configs" / "reference_eval_subset.txt")
    out = {"seeds": {}, "timing": {}}
    t_start = time.perf_counter()
    for seed in SEEDS:
        tcfg = cfg.with_seed(seed)
        row = {}
        t0 = time.perf_counter()
        tl_teacher = train_teacher(train, tcfg.teacher, use_tl=True).net
        row["teacher_tl"] = evaluate_model(tl_teacher, test, ids).summary()
        pseudo = generate_pseudo_labels(tl_teacher, train, tcfg.student.tta_scales, tcfg.student.tta_flip,
                                        tcfg.student.pseudo_threshold)
        data = apply_pseudo_labels(train, pseudo)
        for scheme in ("a", "e", "j", "l"):
            res = train_student(data, tl_teacher, tcfg.student, Switches.scheme(scheme))
            row[scheme] = evaluate_model(res.net, test, ids).summary()
            if scheme == "l":
                e_t, e_s = _embedding_norms(res, tl_teacher, train, tcfg.student)
                row["l_norms"] = {"teacher": e_t.tolist(), "student": e_s.tolist(),
                                  "lstm_absmax": max(float(p.detach().abs().max()) for p in res.embedder.parameters())}
        out["timing"][f"ladder_{seed}"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        plain = train_teacher(train, tcfg.teacher, use_tl=False).net
        row["teacher_plain"] = evaluate_model(plain, test, ids).summary()
        row["pf_from_tl"] = evaluate_model(train_student(train, tl_teacher, tcfg.student, Switches.scheme("b")).net,
                                           test, ids).summary()
        row["pf_from_plain"] = evaluate_model(train_student(train, plain, tcfg.student, Switches.scheme("b")).net,
                                              test, ids).summary()
        out["timing"][f"transfer_{seed}"] = time.perf_counter() - t0
        out["seeds"][seed] = row
    out["timing"]["total"] = time.perf_counter() - t_start
    record = os.environ.get("TCSEG_RECORD")
    if record:
        Path(record).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    return out


def test_criterion_6_ablation_ladder(ladder, verdict):
    rows = ladder["seeds"]
    ladder_time = sum(v for k, v in ladder["timing"].items() if k.startswith("ladder_"))
    gains = [rows[s]["e"]["tc"] - rows[s]["a"]["tc"] for s in SEEDS]
    e_ok = all(g > 0 for g in gains) and 100 * np.mean(gains) >= 1.0
    j_ok = all(rows[s]["j"]["miou"] > rows[s]["a"]["miou"] for s in SEEDS)
    l_ok = all(rows[s]["l"]["miou"] >= rows[s]["a"]["miou"] and rows[s]["l"]["tc"] >= rows[s]["a"]["tc"]
               for s in SEEDS)
    time_ok = ladder_time < 30 * 60
    verdict("6(i) TL beats baseline on TC", e_ok,
            "TC gains " + ", ".join(f"{100 * g:+.2f}" for g in gains) + f" pts, mean {100 * np.mean(gains):+.2f}")
    verdict("6(ii) PL beats baseline on mIoU", j_ok, ", ".join(
        f"seed {s}: {100 * rows[s]['j']['miou']:.2f} vs {100 * rows[s]['a']['miou']:.2f}" for s in SEEDS))
    verdict("6(iii) full scheme >= baseline on mIoU and TC", l_ok, ", ".join(
        f"seed {s}: mIoU {100 * (rows[s]['l']['miou'] - rows[s]['a']['miou']):+.2f} "
        f"TC {100 * (rows[s]['l']['tc'] - rows[s]['a']['tc']):+.2f}" for s in SEEDS))
    verdict("6 runtime", time_ok, f"{ladder_time / 60:.1f} min")
    assert e_ok and j_ok and l_ok and time_ok


def test_criterion_7_teacher_transfer(ladder, verdict):
    rows = ladder["seeds"]
    tc_wins = sum(rows[s]["pf_from_tl"]["tc"] >= rows[s]["pf_from_plain"]["tc"] for s in SEEDS)
    close = all(abs(rows[s]["pf_from_tl"]["miou"] - rows[s]["pf_from_plain"]["miou"]) <= 0.01 for s in SEEDS)
    ok = tc_wins >= 2 and close
    verdict("7 teacher transfer", ok, f"TC >= plain-teacher student in {tc_wins}/3 seeds; mIoU gaps " + ", ".join(
        f"{100 * (rows[s]['pf_from_tl']['miou'] - rows[s]['pf_from_plain']['miou']):+.2f}" for s in SEEDS))
    assert ok


def test_criterion_9_convlstm_collapse_guard(ladder, verdict):
    rows = ladder["seeds"]
    t_unit = all(abs(n - 1) < 1e-5 for s in SEEDS for n in rows[s]["l_norms"]["teacher"])
    s_min = min(n for s in SEEDS for n in rows[s]["l_norms"]["student"])
    w_max = max(rows[s]["l_norms"]["lstm_absmax"] for s in SEEDS)
    ok = t_unit and s_min > 0.1 and w_max <= 1.0
    verdict("9 ConvLSTM collapse guard", ok, f"|E_T|=1: {t_unit}, min |E_S| {s_min:.3f}, max |w| {w_max:.3f}")
    assert ok
