import json

import pytest
import yaml

from tcseg import cli

TINY = {
    "benchmark": {"num_train": 2, "num_test": 2, "height": 32, "width": 32, "num_frames": 4, "labeled_stride": 2,
                  "seed": 5},
    "teacher": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2},
    "student": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2},
    "schemes": ["a"],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train-teacher", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(root / "teacher")]) == 0
    return root, cfg


def read_outputs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_gen_data_layout_and_manifest(workspace):
    root, _ = workspace
    meta = json.loads((root / "data" / "dataset.json").read_text())
    assert len(meta["train"]) == 2 and len(meta["test"]) == 2
    man = json.loads((root / "data" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["dataset_hash"] == meta["hash"]
    assert man["seeds"] == {"benchmark": 5}
    assert all((root / "data" / o).exists() for o in man["outputs"])
    assert (root / "data" / "eval_subset.txt").read_text().split() == ["0", "1"]


def test_rerun_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert read_outputs(tmp_path / "d") == read_outputs(root / "data")
    before = read_outputs(root / "teacher")
    assert cli.main(["train-teacher", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(root / "teacher")]) == 0
    assert read_outputs(root / "teacher") == before


def test_full_chain_and_ablation_composition(workspace):
    root, cfg = workspace
    data, teacher = str(root / "data"), str(root / "teacher" / "teacher.ckpt")
    assert cli.main(["pseudo-label", "--config", str(cfg), "--data", data, "--teacher", teacher,
                     "--out", str(root / "pl")]) == 0
    assert cli.main(["train-student", "--config", str(cfg), "--data", str(root / "pl"), "--teacher", teacher,
                     "--scheme", "l", "--out", str(root / "student_l")]) == 0
    assert cli.main(["train-student", "--config", str(cfg), "--data", str(root / "pl"), "--scheme", "a",
                     "--out", str(root / "student_a")]) == 0
    assert cli.main(["evaluate", "--data", str(root / "pl"), "--checkpoint", str(root / "student_a" / "student.ckpt"),
                     "--out", str(root / "eval_a")]) == 0
    assert cli.main(["ablation", "--config", str(cfg), "--data", str(root / "pl"), "--teacher", teacher,
                     "--scheme", "a", "--out", str(root / "abl")]) == 0
    table = (root / "abl" / "ablation.txt").read_text().splitlines()
    assert len(table) == 2 and table[1].startswith("a")
    assert (root / "abl" / "report_a.csv").read_text() == (root / "eval_a" / "report.csv").read_text()
    for name in ("ablation.png", "report_a_tc.png", "eval_subset.txt"):
        assert (root / "abl" / name).is_file()


def test_switch_override(workspace):
    root, cfg = workspace
    assert cli.main(["train-student", "--config", str(cfg), "--data", str(root / "data"), "--scheme", "a",
                     "--switch", "tl=on", "--out", str(root / "s_tl")]) == 0
    man = json.loads((root / "s_tl" / "manifest.json").read_text())
    assert man["config"]["switches"] == {"tl": True, "pf": False, "mf": False, "pl": False}
    header = (root / "s_tl" / "student_log.csv").read_text().splitlines()[1].split(",")
    assert header[3] != ""


def test_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert cli.main(["evaluate", "--data", data, "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_MISSING
    bad = tmp_path / "bad.yaml"
    bad.write_text("teacher: [unclosed")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "g")]) == cli.EXIT_CONFIG
    bad.write_text("student: {learning_rate: 1}")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "g")]) == cli.EXIT_CONFIG
    assert cli.main(["train-student", "--config", str(cfg), "--data", data, "--switch", "xx=on",
                     "--out", str(tmp_path / "s")]) == cli.EXIT_CONFIG
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert cli.main(["evaluate", "--data", data, "--checkpoint", str(junk),
                     "--out", str(tmp_path / "e2")]) == cli.EXIT_FORMAT
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(root / "teacher")]) \
        == cli.EXIT_CONFLICT


def test_hash_mismatch(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    (tmp_path / "d" / "eval_subset.txt").write_text("1\n")
    assert cli.main(["evaluate", "--data", str(tmp_path / "d"), "--module", "teacher",
                     "--checkpoint", str(root / "teacher" / "teacher.ckpt"), "--out", str(tmp_path / "e")]) \
        == cli.EXIT_HASH


def test_output_root_env(workspace, tmp_path, monkeypatch):
    _, cfg = workspace
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "dataset.json").is_file()


def test_config_round_trip():
    c = cli.ExperimentConfig.from_dict(TINY)
    assert cli.ExperimentConfig.from_dict(c.to_dict()) == c
    assert c.with_seed(4).student.seed == 4 and c.with_seed(4).teacher.seed == 4
