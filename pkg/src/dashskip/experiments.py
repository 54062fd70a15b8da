"""Comparisons at matched compute: DASH, RandomSkip, static skipping and the
compensation ladder, over several scorer seeds.

A :class:`Workbench` holds one frozen model with its scale table and lazily
built :class:`~dashskip.oracle.PathTable` memos (training pool and test set,
with and without compensation) so that scorer training, the budget search and
the oracle share the same transformer evaluations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import ScaleTable
from .model import STATES, ToyModel, path_cost
from .oracle import PathTable, pareto_frontier, random_skip_baseline
from .policy import init_scorer
from .profiler import io_similarity_profile, similarity_skip_order, static_skip_path
from .rewards import RewardConfig, ScorerTrainConfig, TableEnv, greedy_cost_ratio, search_beta
from .runtime import evaluate_policy
from .tasks import Task

log = logging.getLogger(__name__)

TARGET_SPEEDUPS = (1.33, 1.67, 2.0)

# compensation ladder: (name, allowed states, use scale table)
LADDER = (
    ("dynamic-no-compensation", (0, 4), False),
    ("dynamic+scale", (0, 4), True),
    ("dynamic+scale+int8", (0, 2, 4), True),
    ("dynamic+scale+int4/int8", STATES, True),
)


@dataclass
class ScorerSetup:
    d_l: int = 16
    d_1: int = 64
    d_2: int = 64
    alpha_penalty: float = 0.05
    single_output: bool = False


@dataclass
class Workbench:
    model: ToyModel
    task: Task
    scales: ScaleTable
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    train_cfg: ScorerTrainConfig = field(default_factory=lambda: ScorerTrainConfig(steps=400, lr=0.01))
    scorer: ScorerSetup = field(default_factory=ScorerSetup)
    train_pool: int = 1024  # training examples memoised for scorer episodes
    tol: float = 0.015  # relative tolerance of the budget search
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def n_layers(self) -> int:
        return self.model.n_layers

    def table(self, which: str, compensated: bool = True) -> PathTable:
        key = (which, compensated)
        if key not in self._tables:
            split = self.task.test if which == "test" else self.task.train.subset(np.arange(self.train_pool))
            self._tables[key] = PathTable(self.model, split, self.scales if compensated else None)
        return self._tables[key]

    def scales_for(self, compensated: bool):
        return self.scales if compensated else None

    def init_scorer(self, seed: int, allowed=STATES):
        s = self.scorer
        return init_scorer(self.model.config.d_model, self.n_layers, s.d_l, s.d_1, s.d_2, s.alpha_penalty,
                           seed=seed, single_output=s.single_output, allowed_states=tuple(allowed))

    @property
    def full_quality(self) -> float:
        return self.table("test").path_quality([4] * self.n_layers)


@dataclass
class MethodResult:
    method: str
    target_speedup: float
    achieved_ratio: float
    quality: float
    seed: int
    beta: float = float("nan")
    attained: bool = True
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"method": self.method, "target_ratio": self.target_speedup, "achieved_ratio": self.achieved_ratio,
                "quality": self.quality, "seed": self.seed}


def train_dash(bench: Workbench, target_speedup: float, seed: int, allowed=STATES, compensated: bool = True,
               method: str = "DASH") -> MethodResult:
    """Budget-searched scorer evaluated greedily on the test split (live model)."""
    env = TableEnv(bench.table("train", compensated), bench.scales_for(compensated), reward_cfg=bench.reward_cfg)
    tc = replace(bench.train_cfg, seed=seed)
    res = search_beta(bench.model, bench.init_scorer(seed, allowed), env, 1.0 / target_speedup, bench.reward_cfg,
                      tc, tol=bench.tol)
    ev = evaluate_policy(bench.model, res.params, bench.task.test, bench.scales_for(compensated))
    return MethodResult(method, target_speedup, ev.mean_cost_ratio, ev.quality, seed, res.beta, res.attained,
                        {"params": res.params, "probes": res.probes, "train_ratio": res.achieved_ratio,
                         "states": ev.states})


def random_skip(bench: Workbench, target_cost_units: float, seed: int, trials: int = 200,
                target_speedup: float = float("nan")) -> MethodResult:
    table = bench.table("test")
    rng = np.random.default_rng(seed)
    res = random_skip_baseline(bench.model, bench.scales, bench.task.test, target_cost_units, trials, rng,
                               path_quality=table.path_quality)
    ratio = float(np.mean([path_cost(p) for p in res.paths])) / (4.0 * bench.n_layers)
    return MethodResult("RandomSkip", target_speedup, ratio, res.mean, seed,
                        extra={"std": res.std, "qualities": res.qualities})


def static_skip(bench: Workbench, target_speedup: float, profile=None) -> MethodResult:
    """Skip the most input/output-similar layers, uncompensated, within the budget."""
    if profile is None:
        profile = io_similarity_profile(bench.model, bench.task.val.tokens)
    order = similarity_skip_order(profile)
    L = bench.n_layers
    budget = 4.0 * L / target_speedup
    k = next(k for k in range(len(order) + 1) if 4 * (L - k) <= budget + 1e-9 or k == len(order))
    path = static_skip_path(L, order[:k])
    q = bench.table("test", compensated=False).path_quality(path)
    return MethodResult("static-similarity", target_speedup, path_cost(path) / (4.0 * L), q, -1,
                        extra={"path": path, "k": k})


def full_model(bench: Workbench) -> MethodResult:
    return MethodResult("full", 1.0, 1.0, bench.full_quality, -1)


def ladder(bench: Workbench, target_speedup: float, seeds, dash=None) -> dict[str, list[MethodResult]]:
    """The compensation ladder at one target: static skip, then dynamic rungs.

    The last rung is plain DASH; pass already trained ``dash`` results (same
    seeds) to reuse them instead of retraining.
    """
    out = {"naive-static-skip": [static_skip(bench, target_speedup)]}
    for name, allowed, comp in LADDER:
        if dash is not None and tuple(allowed) == STATES and comp:
            out[name] = [replace(d, method=name) for d in dash]
        else:
            out[name] = [train_dash(bench, target_speedup, s, allowed, comp, method=name) for s in seeds]
    return out


def dash_vs_random(bench: Workbench, target_speedup: float, seeds, trials: int = 200):
    """Per seed: the DASH result and RandomSkip matched to its realised test cost."""
    pairs = []
    for s in seeds:
        d = train_dash(bench, target_speedup, s)
        cost_units = d.achieved_ratio * 4.0 * bench.n_layers
        r = random_skip(bench, cost_units, s, trials, target_speedup)
        pairs.append((d, r))
    return pairs


def paired_margin(pairs) -> tuple[float, float]:
    """Mean and standard error of (DASH - RandomSkip) quality over seeds."""
    d = np.array([a.quality - b.quality for a, b in pairs])
    se = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else float("nan")
    return float(d.mean()), se


def frontier(bench: Workbench):
    return pareto_frontier(bench.table("test").evaluations())


def run_bench(bench: Workbench, targets=TARGET_SPEEDUPS, seeds=range(5), trials: int = 200,
              with_ladder: bool = True) -> list[MethodResult]:
    """Methods x speedups table (plus the ladder) as flat result rows."""
    rows = [full_model(bench)]
    for t in targets:
        rows.append(static_skip(bench, t))
        pairs = dash_vs_random(bench, t, seeds, trials)
        for d, r in pairs:
            rows += [d, r]
        if with_ladder:
            for name, res in ladder(bench, t, seeds, dash=[d for d, _ in pairs]).items():
                if name not in ("naive-static-skip", "dynamic+scale+int4/int8"):
                    rows += res
    return rows
