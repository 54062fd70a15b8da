import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dashskip import checkpoint as ckpt
from dashskip.calibration import compute_scale_table, sample_calibration_set
from dashskip.cli import load_config, main
from dashskip.tasks import make_task

TINY = {
    "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 9},
    "task": {"hops": 2, "n_pairs": 4, "multiple_choice": True, "n_train": 256, "n_val": 64, "n_test": 64,
             "accuracy_floor": 0.0},
    "base_train": {"steps": 30, "batch_size": 16, "eval_every": 10},
    "scorer": {"d_l": 4, "d_1": 8, "d_2": 8},
    "train": {"steps": 20, "batch_size": 16, "lr": 0.01, "log_every": 5},
    "targets": [1.33],
    "calib_size": 16,
    "train_pool": 64,
    "bench_seeds": 1,
    "random_trials": 10,
    "profile_samples": 8,
}


def write_config(tmp_path, **over):
    doc = {**TINY, **over, "out": str(tmp_path / "out"), "checkpoint": str(tmp_path / "ck" / "m.json")}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny checkpoint that has been through train-base and calibrate."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["train-base", "--config", cfg]) == 0
    assert main(["calibrate", "--config", cfg]) == 0
    return tmp, cfg


def run(*args):
    return main(list(args))


def test_train_base_is_byte_reproducible_and_reports_one_line(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("train-base", "--config", cfg) == 0
    line = capsys.readouterr().out.strip()
    assert "\n" not in line
    fields = dict(kv.split("=", 1) for kv in line.split())
    assert 0.0 <= float(fields["val_accuracy"]) <= 1.0 and fields["seed"] == "0"
    first = (tmp_path / "ck" / "m.json").read_bytes()
    assert run("train-base", "--config", cfg) == 0
    assert (tmp_path / "ck" / "m.json").read_bytes() == first


def test_profile_outputs(trained, capsys):
    tmp, cfg = trained
    assert run("profile", "--config", cfg) == 0
    io = (tmp / "out" / "io_similarity.csv").read_text().splitlines()
    assert io[0].startswith("# profile config_hash=") and "seed=" in io[0]
    assert len(io) == 2 + 4 * 8
    sweep = list(csv.DictReader(l for l in (tmp / "out" / "static_sweep.csv").read_text().splitlines()
                                if not l.startswith("#")))
    c = ckpt.load_checkpoint(tmp / "ck" / "m.json")
    from dashskip.model import accuracy
    assert float(sweep[0]["accuracy"]) == accuracy(c.model, make_task(c.task_spec).test)
    before = (tmp / "out" / "io_similarity.csv").read_bytes()
    assert run("profile", "--config", cfg) == 0
    assert (tmp / "out" / "io_similarity.csv").read_bytes() == before


def test_calibrate_is_idempotent_and_matches_recomputation(trained):
    tmp, cfg = trained
    path = tmp / "ck" / "m.json"
    first = path.read_bytes()
    assert run("calibrate", "--config", cfg) == 0
    assert path.read_bytes() == first
    c = ckpt.load_checkpoint(path)
    calib = sample_calibration_set(make_task(c.task_spec).train.tokens, 16, 0)
    assert c.scales.scales == compute_scale_table(c.model, calib).scales


def test_default_calibration_size():
    assert load_config(None).calib_size == 128


def test_train_scorer_log_and_zero_lambda(tmp_path, trained):
    tmp, cfg = trained
    own = tmp_path / "m.json"
    own.write_bytes((tmp / "ck" / "m.json").read_bytes())
    args = ["--config", cfg, "--checkpoint", str(own), "--out", str(tmp_path / "o")]
    assert run("train-scorer", *args) == 0
    rows = list(csv.DictReader(l for l in (tmp_path / "o" / "scorer_log.csv").read_text().splitlines()
                               if not l.startswith("#")))
    assert list(rows[0]) == ["step", "loss_ce", "loss_rl", "mean_cost_ratio", "accuracy", "tau"]
    taus = [float(r["tau"]) for r in rows]
    assert all(a >= b for a, b in zip(taus, taus[1:]))

    lam0 = write_config(tmp_path, reward={"lam": 0.0})
    assert run("train-scorer", "--config", lam0, "--checkpoint", str(own), "--out", str(tmp_path / "o")) == 0
    from dashskip.cli import _scorer_init
    c = ckpt.load_checkpoint(own)
    init = _scorer_init(load_config(lam0), c.model, 0)
    assert all(np.array_equal(c.scorer.arrays()[k], v) for k, v in init.arrays().items())


def test_infer_modes_agree_for_index_only_scorer(tmp_path, trained, capsys):
    tmp, cfg = trained
    own = tmp_path / "m.json"
    own.write_bytes((tmp / "ck" / "m.json").read_bytes())
    from dashskip.cli import _scorer_init
    from dashskip.calibration import ScaleTable
    c = ckpt.load_checkpoint(own)
    p = _scorer_init(load_config(cfg), c.model, 3)
    p.W1[:16] = 0.0
    ckpt.update_checkpoint(own, scorer=p, scales=ScaleTable.identity(4))
    docs = {}
    for mode in ("sync", "async"):
        capsys.readouterr()
        assert run("infer", "--config", cfg, "--checkpoint", str(own), "--out", str(tmp_path / "o"),
                   "--mode", mode, "--input", "1 2 3 4 5 6 7 8 1") == 0
        docs[mode] = json.loads(capsys.readouterr().out)
    assert docs["sync"]["trace"] == docs["async"]["trace"]
    for key in ("trace", "realized_cost_ratio", "fallback_count", "config_hash", "seed"):
        assert key in docs["async"]


def test_bench_and_oracle_outputs(trained, capsys):
    tmp, cfg = trained
    assert run("bench", "--config", cfg) == 0
    lines = (tmp / "out" / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# bench config_hash=")
    assert lines[1] == "method,target_ratio,achieved_ratio,quality,seed"
    methods = {r["method"] for r in csv.DictReader(lines[1:])}
    assert {"full", "DASH", "RandomSkip"} <= methods
    assert any("static" in m for m in methods)
    assert run("oracle", "--config", cfg) == 0
    front = (tmp / "out" / "frontier.csv").read_text().splitlines()
    assert front[0].startswith("# oracle") and front[1] == "cost,quality,path"


def test_exit_codes(tmp_path, capsys):
    assert run("profile", "--checkpoint", str(tmp_path / "nope.json")) == 2
    assert run("infer", "--config", str(tmp_path / "missing.yaml")) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {n_layerz: 3}\n")
    assert run("profile", "--config", str(bad)) == 1
    assert run("bench", "--target-ratio", "9") == 1
    with pytest.raises(SystemExit) as e:
        run("no-such-command")
    assert e.value.code == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dashskip", "oracle", "--checkpoint", str(tmp_path / "x.json")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "does not exist" in res.stderr


def test_shipped_config_lists_the_defaults():
    from pathlib import Path

    from dashskip.cli import RunConfig
    assert load_config(str(Path(__file__).parents[1] / "configs" / "default.yaml")) == RunConfig()
