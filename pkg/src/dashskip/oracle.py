"""Exhaustive ground truth for small models.

Enumerates every admissible path, evaluates quality and cost, extracts the
Pareto frontier, and provides the RandomSkip baseline. ``PathTable`` memoises
all path prefixes of a frozen model over one split so that the same numbers
(and policy rollouts) can be read without re-running the transformer.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import (COST, STATES, ToyModel, as_tokens, check_path, path_cost, path_to_str, predict_labels,
                    sequence_nll)
from .tasks import Split

MAX_ENUM_LAYERS = 8


class EnumerationTooLarge(ValueError):
    pass


def enumerate_paths(n_layers: int) -> list[tuple[int, ...]]:
    """All state sequences with the first and last layer at state 4."""
    if n_layers < 3:
        raise ValueError("need at least 3 layers")
    if n_layers > MAX_ENUM_LAYERS:
        raise EnumerationTooLarge(
            f"{4 ** (n_layers - 2)} paths for L={n_layers}; use random_skip_baseline sampling instead")
    return [(4,) + mid + (4,) for mid in itertools.product(STATES, repeat=n_layers - 2)]


@torch.no_grad()
def quality(model: ToyModel, path, scales, eval_set: Split, batch_size: int = 1024) -> float:
    """Accuracy for labelled splits, negative perplexity otherwise (higher is better)."""
    path = check_path(path, model.n_layers)
    if eval_set.labels is not None:
        hits = []
        for lo in range(0, len(eval_set), batch_size):
            logits = model.forward_with_path(eval_set.tokens[lo:lo + batch_size], path, scales)
            cand = None if eval_set.candidates is None else eval_set.candidates[lo:lo + batch_size]
            hits.append(predict_labels(logits, cand) == eval_set.labels[lo:lo + batch_size])
        return float(np.concatenate(hits).mean())
    nll = []
    for lo in range(0, len(eval_set), batch_size):
        tok = as_tokens(eval_set.tokens[lo:lo + batch_size])
        nll.append(sequence_nll(model.forward_with_path(tok, path, scales), tok).numpy())
    return -float(np.exp(np.concatenate(nll).mean()))


@dataclass(frozen=True)
class PathEvaluation:
    path: tuple[int, ...]
    cost: int
    quality: float
    distance: float  # quality gap to the all-4 path

    @property
    def path_str(self) -> str:
        return path_to_str(self.path)


def evaluate_path(model: ToyModel, path, scales, eval_set: Split, full_quality: float | None = None) -> PathEvaluation:
    path = check_path(path, model.n_layers)
    q = quality(model, path, scales, eval_set)
    if full_quality is None:
        full_quality = q if all(s == 4 for s in path) else quality(model, [4] * model.n_layers, scales, eval_set)
    return PathEvaluation(path, path_cost(path), q, full_quality - q)


def dominates(a: PathEvaluation, b: PathEvaluation) -> bool:
    return a.cost <= b.cost and a.quality >= b.quality and (a.cost < b.cost or a.quality > b.quality)


def pareto_frontier(evals: Sequence[PathEvaluation]) -> list[PathEvaluation]:
    """Evaluations not dominated in (lower cost, higher quality), sorted by cost.

    Exact duplicates in (cost, quality) are all kept.
    """
    if not evals:
        raise ValueError("pareto_frontier needs at least one evaluation")
    ordered = sorted(evals, key=lambda e: (e.cost, -e.quality, e.path))
    front: list[PathEvaluation] = []
    best = -np.inf
    for e in ordered:
        if e.quality > best:
            front.append(e)
            best = e.quality
        elif e.quality == best and front and front[-1].cost == e.cost:
            front.append(e)
    return front


def frontier_quality_at(front: Sequence[PathEvaluation], cost: float) -> float:
    """Best frontier quality at cost <= ``cost`` (-inf if none)."""
    qs = [e.quality for e in front if e.cost <= cost + 1e-9]
    return max(qs) if qs else -np.inf


def write_frontier_csv(path, front: Sequence[PathEvaluation], header_comment: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f)
        w.writerow(["cost", "quality", "path"])
        for e in front:
            w.writerow([e.cost, repr(e.quality), e.path_str])


@dataclass(frozen=True)
class BaselineResult:
    mean: float
    std: float
    qualities: np.ndarray
    paths: list


def random_skip_baseline(model: ToyModel, scales, eval_set: Split, target_cost: float, trials: int,
                         rng: np.random.Generator, path_quality=None) -> BaselineResult:
    """Mean quality of ``trials`` random admissible paths costing ``target_cost`` +- 1 unit.

    ``path_quality`` optionally maps a path to its quality (e.g. a PathTable
    lookup) to avoid re-running the model.
    """
    if model.n_layers <= MAX_ENUM_LAYERS:
        pool = [p for p in enumerate_paths(model.n_layers) if abs(path_cost(p) - target_cost) <= 1 + 1e-9]
    else:
        pool = _sample_near_cost(model.n_layers, target_cost, rng)
    if not pool:
        raise ValueError(f"no admissible path within 1 cost unit of {target_cost}")
    picks = rng.integers(0, len(pool), size=trials)
    paths = [pool[i] for i in picks]
    cache: dict = {}
    qs = []
    for p in paths:
        if p not in cache:
            cache[p] = path_quality(p) if path_quality is not None else quality(model, p, scales, eval_set)
        qs.append(cache[p])
    qs = np.asarray(qs)
    return BaselineResult(float(qs.mean()), float(qs.std()), qs, paths)


def _sample_near_cost(n_layers, target_cost, rng, draws: int = 200_000):
    mids = rng.choice(STATES, size=(draws, n_layers - 2))
    costs = 8 + mids.sum(axis=1)  # state codes equal their costs
    keep = np.abs(costs - target_cost) <= 1 + 1e-9
    return sorted({(4,) + tuple(int(x) for x in m) + (4,) for m in mids[keep]})


# -- memoised path table -----------------------------------------------------------------


class PathTable:
    """Every path prefix of a frozen model over one split.

    ``pooled[d]`` has shape (4**max(d-1, 0), N, d_model): the mean-pooled
    hidden state after layers 1..d for each prefix (prefix ids are base-4
    numbers over candidate indices of layers 2..d). ``correct``/``nll`` are
    indexed by leaf id (layers 2..L-1) and example.
    """

    def __init__(self, model: ToyModel, split: Split, scales=None, batch_size: int = 1024):
        L = model.n_layers
        if L > MAX_ENUM_LAYERS:
            raise EnumerationTooLarge(f"path table for L={L} is too large")
        self.n_layers = L
        self.split = split
        n = len(split)
        d = model.config.d_model
        self.pooled = [np.zeros((4 ** max(k - 1, 0), n, d)) for k in range(L)]
        n_leaf = 4 ** (L - 2)
        self.correct = np.zeros((n_leaf, n), dtype=bool) if split.labels is not None else None
        self.nll = np.zeros((n_leaf, n))
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                sl = slice(lo, lo + batch_size)
                self._fill(model, split, sl, scales)

    def _fill(self, model, split, sl, scales):
        L = self.n_layers
        tok = as_tokens(split.tokens[sl])
        h = model.embed(tok)
        self.pooled[0][0, sl] = h.mean(dim=-2).numpy()
        h = model.layer_forward(h, 1, 4, scales)
        labels = None if split.labels is None else split.labels[sl]
        cand = None if split.candidates is None else split.candidates[sl]

        def dfs(h, depth, pid):
            # h has passed layers 1..depth
            self.pooled[depth][pid, sl] = h.mean(dim=-2).numpy()
            if depth == L - 1:
                out = model.head(model.layer_forward(h, L, 4, scales))
                if labels is not None:
                    self.correct[pid, sl] = predict_labels(out, cand) == labels
                    logp = out[:, -1].log_softmax(-1)
                    self.nll[pid, sl] = -logp.gather(1, torch.as_tensor(labels)[:, None])[:, 0].numpy()
                else:
                    self.nll[pid, sl] = sequence_nll(out, tok).numpy()
                return
            for k, s in enumerate(STATES):
                dfs(model.layer_forward(h, depth + 1, s, scales), depth + 1, pid * 4 + k)

        dfs(h, 1, 0)

    @staticmethod
    def leaf_id(path: Sequence[int]) -> int:
        pid = 0
        for s in path[1:-1]:
            pid = pid * 4 + STATES.index(int(s))
        return pid

    def leaf_path(self, leaf: int) -> tuple[int, ...]:
        mid = []
        for _ in range(self.n_layers - 2):
            mid.append(STATES[leaf % 4])
            leaf //= 4
        return (4,) + tuple(reversed(mid)) + (4,)

    def path_quality(self, path) -> float:
        leaf = self.leaf_id(check_path(path, self.n_layers))
        if self.correct is not None:
            return float(self.correct[leaf].mean())
        return -float(np.exp(self.nll[leaf].mean()))

    def evaluations(self) -> list[PathEvaluation]:
        full = self.path_quality([4] * self.n_layers)
        out = []
        for p in enumerate_paths(self.n_layers):
            q = self.path_quality(p)
            out.append(PathEvaluation(p, path_cost(p), q, full - q))
        return out

    @property
    def full_costs(self) -> np.ndarray:
        return np.array([path_cost(self.leaf_path(i)) for i in range(4 ** (self.n_layers - 2))])
