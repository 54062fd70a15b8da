"""Scoring network that picks the execution state of the next layer.

The scorer is a three-matrix GELU MLP over ``[h; E(l_i); E(l_i + 1)]`` with
one output column per candidate state, followed by the transition penalty
``-alpha_penalty * (s_next - s_current)``. Everything is numpy float64 and the
backward pass is written out by hand so it can be checked against finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import STATES
from .numerics import gelu, gelu_grad, log_softmax_with_temperature, softmax_with_temperature

STATE_CODES = np.array(STATES, dtype=np.float64)
STATE_INDEX = {s: i for i, s in enumerate(STATES)}
DEFAULT_TAU_MIN = 0.05


@dataclass
class ScorerParams:
    W1: np.ndarray  # (d_h + 2 d_l, d_1)
    W2: np.ndarray  # (d_1, d_2)
    W3: np.ndarray  # (d_2, 4), or (d_2, 1) in single-output mode
    E: np.ndarray  # (L + 1, d_l); row k embeds layer k, row 0 unused
    alpha_penalty: float = 0.05
    allowed_states: tuple[int, ...] = STATES

    def __post_init__(self):
        if self.alpha_penalty < 0:
            raise ValueError("alpha_penalty must be nonnegative")
        if not set(self.allowed_states) <= set(STATES) or 4 not in self.allowed_states:
            raise ValueError(f"allowed_states must be a subset of {STATES} containing 4")
        self.allowed_states = tuple(sorted(set(self.allowed_states)))
        din = self.W1.shape[0]
        if self.W2.shape[0] != self.W1.shape[1] or self.W3.shape[0] != self.W2.shape[1]:
            raise ValueError("scorer weight shapes do not chain")
        if self.W3.shape[1] not in (1, 4):
            raise ValueError("W3 must have 4 columns (per-candidate) or 1 (single output)")
        if din != self.d_h + 2 * self.d_l or self.d_h <= 0:
            raise ValueError("W1 rows must equal d_h + 2 * d_l")

    @property
    def d_l(self) -> int:
        return self.E.shape[1]

    @property
    def d_h(self) -> int:
        return self.W1.shape[0] - 2 * self.E.shape[1]

    @property
    def n_layers(self) -> int:
        return self.E.shape[0] - 1

    @property
    def single_output(self) -> bool:
        return self.W3.shape[1] == 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2, "W3": self.W3, "E": self.E}

    def copy(self) -> "ScorerParams":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ScorerParams":
        return replace(self, **arrays)


@dataclass
class ScorerGrad:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    E: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2, "W3": self.W3, "E": self.E}

    @classmethod
    def zeros_like(cls, p: ScorerParams) -> "ScorerGrad":
        return cls(**{k: np.zeros_like(v) for k, v in p.arrays().items()})

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.arrays().values()))

    def scaled(self, c: float) -> "ScorerGrad":
        return ScorerGrad(**{k: v * c for k, v in self.arrays().items()})

    def __add__(self, other: "ScorerGrad") -> "ScorerGrad":
        return ScorerGrad(**{k: v + other.arrays()[k] for k, v in self.arrays().items()})


def init_scorer(d_h: int, n_layers: int, d_l: int = 16, d_1: int = 64, d_2: int = 64,
                alpha_penalty: float = 0.05, seed: int = 0, single_output: bool = False,
                allowed_states: tuple[int, ...] = STATES) -> ScorerParams:
    """Zero-mean uniform init with bound ``1/sqrt(fan_in)``; no biases."""
    rng = np.random.default_rng(seed)

    def u(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    return ScorerParams(
        W1=u(d_h + 2 * d_l, (d_h + 2 * d_l, d_1)),
        W2=u(d_1, (d_1, d_2)),
        W3=u(d_2, (d_2, 1 if single_output else 4)),
        E=rng.normal(0.0, 1.0, size=(n_layers + 1, d_l)),
        alpha_penalty=alpha_penalty,
        allowed_states=allowed_states,
    )


@dataclass(frozen=True)
class CandidateScores:
    """Scores for the candidate states, ordered as ``STATES`` = (0, 1, 2, 4)."""

    values: np.ndarray
    allowed: tuple[int, ...] = STATES

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (4,) or not np.all(np.isfinite(v)):
            raise ValueError("candidate scores must be 4 finite values")
        object.__setattr__(self, "values", v)

    def __getitem__(self, state: int) -> float:
        return float(self.values[STATE_INDEX[state]])

    def as_dict(self) -> dict[int, float]:
        return {s: float(v) for s, v in zip(STATES, self.values)}

    @classmethod
    def from_dict(cls, d: dict[int, float]) -> "CandidateScores":
        return cls(np.array([d[s] for s in STATES], dtype=np.float64))


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    layer: int
    scores: np.ndarray = field(repr=False, default=None)


def scorer_forward(params: ScorerParams, H, layer: int, s_current) -> ForwardCache:
    """Batched scoring; ``H`` is (B, d_h), ``s_current`` scalar or (B,)."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[1] != params.d_h:
        raise ValueError(f"hidden width {H.shape[1]} != scorer d_h {params.d_h}")
    if not 1 <= layer <= params.n_layers - 1:
        raise ValueError(f"layer index {layer} outside [1, {params.n_layers - 1}]")
    if not np.all(np.isfinite(H)):
        raise ValueError("hidden state has non-finite entries")
    b = H.shape[0]
    emb = np.concatenate([params.E[layer], params.E[layer + 1]])
    x = np.concatenate([H, np.broadcast_to(emb, (b, emb.shape[0]))], axis=1)
    z1 = x @ params.W1
    a1 = gelu(z1)
    z2 = a1 @ params.W2
    a2 = gelu(z2)
    base = a2 @ params.W3
    s_cur = np.broadcast_to(np.asarray(s_current, dtype=np.float64), (b,))
    scores = base - params.alpha_penalty * (STATE_CODES[None, :] - s_cur[:, None])
    return ForwardCache(x, z1, a1, z2, a2, layer, scores)


def scorer_backward(params: ScorerParams, cache: ForwardCache, dscores: np.ndarray) -> ScorerGrad:
    """Gradient of ``sum(dscores * scores)`` with respect to the scorer weights."""
    dbase = dscores.sum(axis=1, keepdims=True) if params.single_output else dscores
    dW3 = cache.a2.T @ dbase
    dz2 = (dbase @ params.W3.T) * gelu_grad(cache.z2)
    dW2 = cache.a1.T @ dz2
    dz1 = (dz2 @ params.W2.T) * gelu_grad(cache.z1)
    dW1 = cache.x.T @ dz1
    dx = dz1 @ params.W1.T
    dE = np.zeros_like(params.E)
    dh, dl = params.d_h, params.d_l
    dE[cache.layer] += dx[:, dh:dh + dl].sum(axis=0)
    dE[cache.layer + 1] += dx[:, dh + dl:].sum(axis=0)
    return ScorerGrad(dW1, dW2, dW3, dE)


def score_candidates(params: ScorerParams, h, layer: int, s_current: int) -> CandidateScores:
    """Scores of the four candidate states for layer ``layer + 1``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise ValueError("score_candidates takes a single hidden vector")
    cache = scorer_forward(params, h[None, :], layer, s_current)
    return CandidateScores(cache.scores[0], params.allowed_states)


def allowed_mask(allowed: tuple[int, ...]) -> np.ndarray:
    return np.array([s in allowed for s in STATES])


def state_probabilities(scores, tau: float, allowed: tuple[int, ...] = STATES) -> np.ndarray:
    """Softmax over the allowed candidates; disallowed states get probability 0."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    mask = allowed_mask(allowed)
    p = np.zeros_like(s)
    p[:, mask] = softmax_with_temperature(s[:, mask], tau, axis=1)
    return p


def state_log_probabilities(scores, tau: float, allowed: tuple[int, ...] = STATES) -> np.ndarray:
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    mask = allowed_mask(allowed)
    lp = np.full_like(s, -np.inf)
    lp[:, mask] = log_softmax_with_temperature(s[:, mask], tau, axis=1)
    return lp


def sample_next_state(scores: CandidateScores, tau: float, rng: np.random.Generator) -> int:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    p = state_probabilities(scores.values, tau, scores.allowed)[0]
    return int(STATES[rng.choice(4, p=p)])


def sample_states(scores: np.ndarray, tau: float, rng: np.random.Generator,
                  allowed: tuple[int, ...] = STATES) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised sampling; returns (state codes, candidate indices)."""
    p = state_probabilities(scores, tau, allowed)
    u = rng.random(p.shape[0])[:, None]
    idx = np.minimum((u > np.cumsum(p, axis=1)).sum(axis=1), 3)
    # guard against round-off landing on a zero-probability column
    bad = p[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = p[bad].argmax(axis=1)
    return np.asarray(STATES)[idx], idx


def greedy_states(scores: np.ndarray, allowed: tuple[int, ...] = STATES) -> np.ndarray:
    """Row-wise argmax over allowed states, ties going to the larger state code."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64)).copy()
    s[:, ~allowed_mask(allowed)] = -np.inf
    rev = s[:, ::-1]
    idx = 3 - rev.argmax(axis=1)
    return np.asarray(STATES)[idx]


def greedy_next_state(scores: CandidateScores) -> int:
    return int(greedy_states(scores.values, scores.allowed)[0])


def temperature(t: float, tau0: float, alpha_decay: float, tau_min: float = DEFAULT_TAU_MIN) -> float:
    """Exponentially decayed sampling temperature, floored at ``tau_min``."""
    if t < 0:
        raise ValueError("step counter must be nonnegative")
    if tau0 <= 0 or tau_min <= 0:
        raise ValueError("temperatures must be positive")
    return max(tau_min, tau0 * math.exp(-alpha_decay * t))


# -- serialisation (scorer-v1) -------------------------------------------------------


def scorer_to_dict(p: ScorerParams) -> dict:
    return {
        "format": "scorer-v1",
        "dims": {"d_h": p.d_h, "d_l": p.d_l, "d_1": p.W1.shape[1], "d_2": p.W2.shape[1],
                 "n_layers": p.n_layers, "outputs": p.W3.shape[1]},
        "alpha_penalty": p.alpha_penalty,
        "allowed_states": list(p.allowed_states),
        "weights": {k: v.tolist() for k, v in p.arrays().items()},
    }


def scorer_from_dict(d: dict) -> ScorerParams:
    if d.get("format") != "scorer-v1":
        raise ValueError(f"unsupported scorer format {d.get('format')!r}")
    w = {k: np.asarray(v, dtype=np.float64) for k, v in d["weights"].items()}
    return ScorerParams(alpha_penalty=float(d["alpha_penalty"]),
                        allowed_states=tuple(d.get("allowed_states", STATES)), **w)
