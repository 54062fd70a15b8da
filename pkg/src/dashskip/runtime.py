"""Dynamic inference: decide-then-execute loops and the overlapped pipeline.

``run_sync`` scores layer ``i+1`` on the true hidden state leaving layer ``i``.
``run_async`` scores it on ``scale_i * h_i`` (the scaled *input* of layer
``i``) in a decision lane while the compute lane runs layer ``i``; a decision
that misses the layer boundary falls back to full precision.

The scorer always sees the mean over sequence positions of the hidden state.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .model import COST, STATES, ToyModel, as_tokens, check_path, path_to_str, scale_of
from .policy import (CandidateScores, ScorerParams, greedy_next_state, greedy_states, sample_states,
                     score_candidates, scorer_forward, state_probabilities)


@dataclass
class DecisionTrace:
    """Realised state sequence for one input plus per-decision records.

    ``scores[j]``/``probs[j]`` belong to the decision for layer ``j + 2``
    (1-based); a ``None`` score marks a timeout fallback.
    """

    states: tuple[int, ...]
    scores: list[CandidateScores | None] = field(default_factory=list)
    probs: list[np.ndarray | None] = field(default_factory=list)
    taus: list[float] = field(default_factory=list)
    rewards: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = tuple(int(s) for s in self.states)
        check_path(self.states, len(self.states))

    @property
    def n_layers(self) -> int:
        return len(self.states)

    @property
    def cost(self) -> int:
        return sum(COST[s] for s in self.states)

    @property
    def cost_ratio(self) -> float:
        return self.cost / (4.0 * self.n_layers)

    def __str__(self) -> str:
        return path_to_str(self.states)


@dataclass
class PipelineReport:
    trace: DecisionTrace
    realized_cost_ratio: float
    wall_times: dict
    mode: str
    fallback_count: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "trace": path_to_str(self.trace.states),
            "states": list(self.trace.states),
            "cost_units": self.trace.cost,
            "realized_cost_ratio": self.realized_cost_ratio,
            "fallback_count": self.fallback_count,
            "scores": [None if s is None else s.as_dict() for s in self.trace.scores],
            "wall_times": self.wall_times,
        }


def pool_hidden(h: torch.Tensor) -> np.ndarray:
    """Mean over sequence positions; (B, T, d) -> (B, d) numpy."""
    return h.mean(dim=-2).detach().numpy()


def approximate_next_hidden(h_i, scale_i: float) -> np.ndarray:
    """Stand-in for the next hidden state: ``scale_i * h_i``."""
    return float(scale_i) * np.asarray(h_i, dtype=np.float64)


def _report(model, states, scores, mode, compute_t, score_t, wait_t, fallbacks):
    trace = DecisionTrace(tuple(states), scores, [None] * len(scores), [])
    trace.timing = {"compute": compute_t, "score": score_t, "wait": wait_t}
    ratio = trace.cost / (4.0 * model.n_layers)
    return PipelineReport(trace, ratio, {"layer_compute_s": compute_t, "decision_s": score_t,
                                         "boundary_wait_s": wait_t}, mode, fallbacks)


@torch.no_grad()
def run_sync(model: ToyModel, scorer: ScorerParams, scales, tokens):
    """Greedy decide-then-execute on the true hidden states.

    Returns ``(logits, PipelineReport)``.
    """
    L = model.n_layers
    h = model.embed(as_tokens(tokens))
    states = [4]
    scores = []
    compute_t, score_t = [], []
    t0 = time.perf_counter()
    h = model.layer_forward(h, 1, 4, scales)
    compute_t.append(time.perf_counter() - t0)
    for i in range(1, L - 1):
        t0 = time.perf_counter()
        sc = score_candidates(scorer, pool_hidden(h)[0], i, states[-1])
        nxt = greedy_next_state(sc)
        score_t.append(time.perf_counter() - t0)
        scores.append(sc)
        states.append(nxt)
        t0 = time.perf_counter()
        h = model.layer_forward(h, i + 1, nxt, scales)
        compute_t.append(time.perf_counter() - t0)
    states.append(4)
    t0 = time.perf_counter()
    h = model.layer_forward(h, L, 4, scales)
    compute_t.append(time.perf_counter() - t0)
    return model.head(h), _report(model, states, scores, "sync", compute_t, score_t, [], 0)


def _decide(scorer: ScorerParams, h_approx: np.ndarray, layer: int, s_current: int):
    sc = score_candidates(scorer, h_approx, layer, s_current)
    return sc, greedy_next_state(sc)


@torch.no_grad()
def run_async_reference(model: ToyModel, scorer: ScorerParams, scales, tokens):
    """Serial execution of the overlapped algorithm (same approximation, no threads)."""
    L = model.n_layers
    h = model.embed(as_tokens(tokens))
    states = [4]
    scores = []
    for i in range(1, L):
        if i <= L - 2:
            h_approx = approximate_next_hidden(pool_hidden(h)[0], scale_of(scales, i))
            sc, nxt = _decide(scorer, h_approx, i, states[-1])
        h = model.layer_forward(h, i, states[-1], scales)
        if i <= L - 2:
            scores.append(sc)
            states.append(nxt)
    states.append(4)
    h = model.layer_forward(h, L, 4, scales)
    return model.head(h), DecisionTrace(tuple(states), scores, [None] * len(scores))


class DecisionLane:
    """Single worker thread that scores the next layer while a layer computes.

    Each submission snapshots its inputs; the result is read exactly once at
    the layer boundary. With ``concurrent=False`` the job runs inline at
    submission time, which gives the degenerate serial schedule.
    """

    def __init__(self, concurrent: bool = True):
        self.concurrent = concurrent
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="decision") if concurrent else None

    def submit(self, fn: Callable, *args):
        if self._pool is None:
            return _Done(fn(*args))
        return self._pool.submit(fn, *args)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Done:
    def __init__(self, value):
        self._value = value

    def result(self, timeout=None):
        return self._value


@torch.no_grad()
def run_async(model: ToyModel, scorer: ScorerParams, scales, tokens, *, lane: DecisionLane | None = None,
              timeout: float | None = None, inject_delay: Callable[[int], float] | None = None):
    """Overlapped inference. Returns ``(logits, PipelineReport)``.

    ``timeout`` bounds the wait at each layer boundary (None waits forever).
    ``inject_delay(layer)`` returns seconds the decision lane sleeps before
    scoring that layer; with a finite timeout this forces fallbacks in tests.
    A missed decision becomes state 4 and is counted in ``fallback_count``.
    """
    own_lane = lane is None
    lane = lane or DecisionLane(concurrent=True)
    L = model.n_layers
    try:
        h = model.embed(as_tokens(tokens))
        states = [4]
        scores: list[CandidateScores | None] = []
        compute_t, submit_t, wait_t = [], [], []
        fallbacks = 0
        for i in range(1, L):
            fut = None
            if i <= L - 2:
                t0 = time.perf_counter()
                h_approx = approximate_next_hidden(pool_hidden(h)[0], scale_of(scales, i))
                delay = inject_delay(i + 1) if inject_delay is not None else 0.0
                job = _decide if not delay else _delayed(_decide, delay)
                fut = lane.submit(job, scorer, h_approx, i, states[-1])
                submit_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            h = model.layer_forward(h, i, states[-1], scales)
            compute_t.append(time.perf_counter() - t0)
            if fut is not None:
                t0 = time.perf_counter()
                try:
                    sc, nxt = fut.result(timeout=timeout)
                except FutureTimeout:
                    fut.cancel()
                    sc, nxt = None, 4
                    fallbacks += 1
                wait_t.append(time.perf_counter() - t0)
                scores.append(sc)
                states.append(nxt)
        states.append(4)
        t0 = time.perf_counter()
        h = model.layer_forward(h, L, 4, scales)
        compute_t.append(time.perf_counter() - t0)
    finally:
        if own_lane:
            lane.close()
    report = _report(model, states, scores, "async", compute_t, submit_t, wait_t, fallbacks)
    return model.head(h), report


def _delayed(fn, delay):
    def job(*args):
        time.sleep(delay)
        return fn(*args)
    return job


# -- batched rollouts (training and evaluation) ---------------------------------------


@dataclass
class Rollout:
    states: np.ndarray  # (B, L) int
    caches: list  # per decision step ForwardCache
    actions: np.ndarray  # (B, L-2) candidate indices
    probs: np.ndarray  # (B, L-2, 4) probabilities at decision time
    logits: torch.Tensor
    tau: float

    @property
    def cost_ratio(self) -> np.ndarray:
        cost = np.vectorize(COST.get)(self.states).sum(axis=1)
        return cost / (4.0 * self.states.shape[1])


def batched_rollout(model: ToyModel, scorer: ScorerParams, tokens, scales=None, *, greedy: bool = True,
                    tau: float = 1.0, rng: np.random.Generator | None = None, approximate: bool = False,
                    grad: bool = False) -> Rollout:
    """Run the decision-execute loop over a batch, one path per row.

    ``approximate=True`` scores on ``scale_i * h_i`` like ``run_async``.
    """
    tokens = as_tokens(tokens)
    L = model.n_layers
    b = tokens.shape[0]
    states = np.full((b, L), 4, dtype=np.int64)
    actions = np.full((b, L - 2), 3, dtype=np.int64)
    probs = np.zeros((b, L - 2, 4))
    caches = []
    with torch.set_grad_enabled(grad):
        h = model.embed(tokens)
        h_in = h
        h = model.layer_forward(h, 1, 4, scales)
        for i in range(1, L - 1):
            if approximate:
                H = approximate_next_hidden(pool_hidden(h_in), scale_of(scales, i))
            else:
                H = pool_hidden(h)
            cache = scorer_forward(scorer, H, i, states[:, i - 1])
            if greedy:
                nxt = greedy_states(cache.scores, scorer.allowed_states)
                idx = np.array([STATES.index(int(s)) for s in nxt])
            else:
                nxt, idx = sample_states(cache.scores, tau, rng, scorer.allowed_states)
            probs[:, i - 1] = state_probabilities(cache.scores, tau, scorer.allowed_states)
            states[:, i] = nxt
            actions[:, i - 1] = idx
            caches.append(cache)
            h_in = h
            h = model.mixed_layer(h, i + 1, nxt, scales)
        h = model.layer_forward(h, L, 4, scales)
        logits = model.head(h)
    return Rollout(states, caches, actions, probs, logits, tau)


@dataclass
class PolicyEvaluation:
    states: np.ndarray
    correct: np.ndarray | None  # per example (classification)
    nll: np.ndarray | None  # per example mean next-token NLL (LM)
    cost_ratio: np.ndarray

    @property
    def mean_cost_ratio(self) -> float:
        return float(self.cost_ratio.mean())

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())

    @property
    def quality(self) -> float:
        if self.correct is not None:
            return self.accuracy
        return -float(np.exp(self.nll.mean()))


@torch.no_grad()
def evaluate_policy(model: ToyModel, scorer: ScorerParams, split, scales=None, *, approximate: bool = False,
                    batch_size: int = 512) -> PolicyEvaluation:
    """Greedy policy over a whole split: per-example paths, outcome and cost."""
    from .model import predict_labels, sequence_nll

    states, correct, nll = [], [], []
    for lo in range(0, len(split), batch_size):
        tok = as_tokens(split.tokens[lo:lo + batch_size])
        ro = batched_rollout(model, scorer, tok, scales, greedy=True, approximate=approximate)
        states.append(ro.states)
        if split.labels is not None:
            cand = None if split.candidates is None else split.candidates[lo:lo + batch_size]
            correct.append(predict_labels(ro.logits, cand) == split.labels[lo:lo + batch_size])
        else:
            nll.append(sequence_nll(ro.logits, tok).numpy())
    states = np.concatenate(states)
    cost = np.vectorize(COST.get)(states).sum(axis=1) / (4.0 * model.n_layers)
    return PolicyEvaluation(states, np.concatenate(correct) if correct else None,
                            np.concatenate(nll) if nll else None, cost)


# -- acceleration-ratio targeting ------------------------------------------------------


@dataclass
class BudgetRow:
    target_speedup: float
    beta: float
    achieved_ratio: float
    quality: float
    attained: bool
    scorer: ScorerParams = field(repr=False)

    @property
    def target_ratio(self) -> float:
        return 1.0 / self.target_speedup


def budget_sweep(model: ToyModel, scorer_template: ScorerParams, targets, env, reward_cfg, train_cfg, *,
                 measure_env=None, eval_env=None, tol: float = 0.015) -> list[BudgetRow]:
    """For each target speedup ``r``, search ``beta`` so the greedy mean cost
    ratio lands on ``1/r`` and record the resulting quality.

    ``env`` supplies training episodes, ``measure_env`` the episodes the
    controller measures cost on (default ``env``) and ``eval_env`` the ones
    the reported ratio and quality come from (default ``measure_env``).
    Targets the search cannot reach are returned with ``attained=False``.
    """
    from .rewards import greedy_cost_ratio, search_beta

    measure_env = measure_env or env
    eval_env = eval_env or measure_env
    rows = []
    for r in targets:
        if not 1.0 <= r <= 4.0:
            raise ValueError(f"target speedup {r} outside [1, 4]")
        res = search_beta(model, scorer_template, env, 1.0 / r, reward_cfg, train_cfg,
                          measure_env=measure_env, tol=tol)
        ratio, q = greedy_cost_ratio(res.params, eval_env)
        rows.append(BudgetRow(r, res.beta, ratio, q, res.attained, res.params))
    return rows
