"""Shared fixtures: one trained reference model per session, cached on disk.

Training the reference model takes a few minutes on one core, so the
checkpoint is stored in pytest's cache directory, keyed by a hash of the
recipe, and reused by later sessions (`pytest --cache-clear` retrains).
"""

from __future__ import annotations

import numpy as np
import pytest

from dashskip import checkpoint as ckpt
from dashskip.calibration import compute_scale_table, sample_calibration_set
from dashskip.experiments import TARGET_SPEEDUPS, Workbench, dash_vs_random
from dashskip.model import BaseTrainConfig, ModelConfig, ToyModel, train_base_model
from dashskip.rewards import ScorerTrainConfig
from dashskip.tasks import TaskSpec, make_task

REF_TASK = TaskSpec(hops=2, n_pairs=4, n_train=8192, multiple_choice=True)
REF_MODEL = ModelConfig(max_seq_len=9)
REF_TRAIN = BaseTrainConfig(steps=3000)
SCORER_SEEDS = tuple(range(5))

_ACCEPTANCE: dict[int, str] = {}


def _recipe() -> dict:
    return {"task": REF_TASK, "model": REF_MODEL, "train": REF_TRAIN}


@pytest.fixture(scope="session")
def ref_task():
    return make_task(REF_TASK)


@pytest.fixture(scope="session")
def ref_model(request, ref_task) -> ToyModel:
    key = ckpt.config_hash(_recipe())
    path = request.config.cache.mkdir("dashskip") / f"ref-{key}.ckpt.json"
    if path.exists():
        return ckpt.load_checkpoint(path).model
    model = train_base_model(REF_MODEL, ref_task, REF_TRAIN)
    ckpt.save_checkpoint(path, model, task_spec=REF_TASK, seed=REF_MODEL.seed)
    return model


@pytest.fixture(scope="session")
def ref_scales(ref_model, ref_task):
    return compute_scale_table(ref_model, sample_calibration_set(ref_task.train.tokens, 128, 0))


@pytest.fixture(scope="session")
def bench(ref_model, ref_task, ref_scales) -> Workbench:
    return Workbench(ref_model, ref_task, ref_scales, train_cfg=ScorerTrainConfig(steps=400, lr=0.01), tol=0.015)


@pytest.fixture(scope="session")
def dash_runs(bench):
    """Budget-searched DASH and matched RandomSkip for every target and seed."""
    return {t: dash_vs_random(bench, t, SCORER_SEEDS) for t in TARGET_SPEEDUPS}


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
