"""Differential rewards, the REINFORCE gradient and scorer training.

Per decision step ``i`` (choosing the state of layer ``i + 1``)::

    r_i   = r_acc * omega_i + r_eff_i
    omega = ((|S_X| - |S_X,i|) / |S_X|) * sigmoid(s_i - 4L / |S_X|)
    r_eff = beta * (4 - s_{i+1})

``r_acc`` is the episode outcome (+1/-1 for classification, a perplexity gap
for language modelling) shared by every step of the episode. The policy loss
is ``-sum_i (r_i - b_i) log pi(s_{i+1} | s_i, h_i)`` with ``b_i`` the batch
mean reward of step ``i``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import COST, STATES, ToyModel, as_tokens, predict_labels, scale_of, sequence_nll
from .numerics import sigmoid
from .policy import (STATE_INDEX, ForwardCache, ScorerGrad, ScorerParams, greedy_states, sample_states,
                     scorer_backward, scorer_forward, state_log_probabilities, state_probabilities, temperature)
from .tasks import Split

log = logging.getLogger(__name__)

PPL_MODES = ("difference", "paper_literal")


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.05
    lam: float = 1.0
    epsilon: float = 1.0
    ppl_sign_mode: str = "difference"

    def __post_init__(self):
        # beta = 0 is allowed: it is the "no efficiency pressure" end of the budget search
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.ppl_sign_mode not in PPL_MODES:
            raise ValueError(f"ppl_sign_mode must be one of {PPL_MODES}")


@dataclass(frozen=True)
class StepReward:
    r_acc: float
    omega: float
    r_eff: float
    r: float


def acc_reward_classification(predicted, gold) -> float:
    return 1.0 if predicted == gold else -1.0


def acc_reward_perplexity(ppl_full, ppl_skip, cfg: RewardConfig):
    """Perplexity-based accuracy reward; works elementwise on arrays."""
    pf = np.asarray(ppl_full, dtype=np.float64)
    ps = np.asarray(ppl_skip, dtype=np.float64)
    if np.any(pf <= 0) or np.any(ps <= 0):
        raise ValueError("perplexities must be positive")
    gap = np.abs(pf - ps) if cfg.ppl_sign_mode == "difference" else np.abs(pf + ps)
    out = (cfg.epsilon - gap) / pf
    return float(out) if out.ndim == 0 else out


def _states_of(trace) -> np.ndarray:
    states = getattr(trace, "states", trace)
    return np.asarray(states, dtype=np.float64)


def position_weight(trace, layer_index: int, n_layers: int | None = None) -> float:
    """Position weight for the decision taken after layer ``layer_index`` (1-based)."""
    s = _states_of(trace)
    L = len(s) if n_layers is None else n_layers
    if len(s) != L:
        raise ValueError("trace length does not match n_layers")
    if not 1 <= layer_index <= L:
        raise ValueError(f"layer index {layer_index} outside [1, {L}]")
    total = math.fsum(s)
    if total <= 0:
        raise ValueError("state sum must be positive")
    prefix = math.fsum(s[:layer_index])
    return (total - prefix) / total * float(sigmoid(s[layer_index - 1] - 4.0 * L / total))


def position_weights(states: np.ndarray) -> np.ndarray:
    """``omega`` for decisions 1..L-2 of every row of ``states`` (B, L)."""
    s = np.asarray(states, dtype=np.float64)
    L = s.shape[1]
    total = s.sum(axis=1, keepdims=True)
    prefix = np.cumsum(s, axis=1)[:, :L - 2]
    return (total - prefix) / total * sigmoid(s[:, :L - 2] - 4.0 * L / total)


def efficiency_reward(s_next, beta: float):
    s = np.asarray(s_next)
    if not np.all(np.isin(s, STATES)):
        raise ValueError(f"invalid state code in {s_next!r}")
    out = beta * (4.0 - s.astype(np.float64))
    return float(out) if out.ndim == 0 else out


def step_reward(r_acc: float, omega: float, r_eff: float) -> StepReward:
    vals = (r_acc, omega, r_eff)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("reward components must be finite")
    return StepReward(float(r_acc), float(omega), float(r_eff), float(r_acc * omega + r_eff))


def episode_rewards(states: np.ndarray, r_acc: np.ndarray, beta: float) -> np.ndarray:
    """Per-step rewards (B, L-2) for a batch of realised paths."""
    states = np.asarray(states)
    omega = position_weights(states)
    return np.asarray(r_acc, dtype=np.float64)[:, None] * omega + efficiency_reward(states[:, 1:-1], beta)


def trace_rewards(trace, r_acc: float, beta: float) -> list[StepReward]:
    s = [int(x) for x in _states_of(trace)]
    L = len(s)
    return [step_reward(r_acc, position_weight(s, i, L), efficiency_reward(s[i], beta)) for i in range(1, L - 1)]


# -- policy gradient -------------------------------------------------------------------


def reinforce_loss(params: ScorerParams, caches: Sequence[ForwardCache], actions: np.ndarray,
                   advantages: np.ndarray, tau: float) -> float:
    """``-mean_b sum_i A_bi log pi(a_bi)`` evaluated from cached scores."""
    total = 0.0
    b = actions.shape[0]
    for j, cache in enumerate(caches):
        lp = state_log_probabilities(cache.scores, tau, params.allowed_states)
        total -= float(np.sum(advantages[:, j] * lp[np.arange(b), actions[:, j]]))
    return total / b


def reinforce_grad(params: ScorerParams, caches: Sequence[ForwardCache], actions: np.ndarray,
                   advantages: np.ndarray, tau: float) -> ScorerGrad:
    """Gradient of :func:`reinforce_loss` by reverse-mode through softmax and MLP."""
    b = actions.shape[0]
    grad = ScorerGrad.zeros_like(params)
    for j, cache in enumerate(caches):
        p = state_probabilities(cache.scores, tau, params.allowed_states)
        onehot = np.zeros_like(p)
        onehot[np.arange(b), actions[:, j]] = 1.0
        dscores = -(advantages[:, j:j + 1] / b) * (onehot - p) / tau
        grad = grad + scorer_backward(params, cache, dscores)
    return grad


def _episode_caches(params: ScorerParams, trace, hiddens):
    states = [int(s) for s in trace.states]
    L = len(states)
    if len(hiddens) != L - 2:
        raise ValueError(f"expected {L - 2} hidden vectors, got {len(hiddens)}")
    if len(trace.probs) != L - 2 or any(p is None for p in trace.probs):
        raise ValueError("trace lacks the sampling probabilities recorded at decision time")
    if len(trace.taus) != L - 2:
        raise ValueError("trace lacks per-step temperatures")
    caches = [scorer_forward(params, np.asarray(hiddens[j])[None, :], j + 1, states[j]) for j in range(L - 2)]
    actions = np.array([[STATE_INDEX[states[j + 1]] for j in range(L - 2)]])
    rewards = np.array([[r.r if isinstance(r, StepReward) else float(r) for r in trace.rewards]])
    if rewards.shape[1] != L - 2:
        raise ValueError("trace rewards are not aligned with its decisions")
    return caches, actions, rewards


def episode_loss(params: ScorerParams, trace, hiddens) -> float:
    """``-sum_i r_i log pi(s_{i+1} | s_i, h_i)`` for one recorded episode."""
    caches, actions, rewards = _episode_caches(params, trace, hiddens)
    total = 0.0
    for j, cache in enumerate(caches):
        lp = state_log_probabilities(cache.scores, trace.taus[j], params.allowed_states)
        total -= rewards[0, j] * lp[0, actions[0, j]]
    return float(total)


def reinforce_gradient(params: ScorerParams, trace, hiddens) -> ScorerGrad:
    """Policy gradient of one episode (no baseline), per-step temperatures from the trace."""
    caches, actions, rewards = _episode_caches(params, trace, hiddens)
    grad = ScorerGrad.zeros_like(params)
    for j, cache in enumerate(caches):
        grad = grad + reinforce_grad(params, [cache], actions[:, j:j + 1], rewards[:, j:j + 1], trace.taus[j])
    return grad


def clip_grad(grad: ScorerGrad, max_norm: float) -> ScorerGrad:
    n = grad.norm()
    if max_norm and n > max_norm:
        return grad.scaled(max_norm / n)
    return grad


def sgd_update(params: ScorerParams, grad: ScorerGrad, lr: float) -> ScorerParams:
    g = grad.arrays()
    return params.with_arrays({k: v - lr * g[k] for k, v in params.arrays().items()})


# -- episode environments --------------------------------------------------------------


@dataclass
class Episodes:
    states: np.ndarray  # (B, L)
    caches: list
    actions: np.ndarray  # (B, L-2)
    r_acc: np.ndarray  # (B,)
    correct: np.ndarray | None
    ce: np.ndarray  # (B,) per-episode task loss
    ce_tensor: torch.Tensor | None = None  # differentiable mean CE (co-training)

    @property
    def cost_ratio(self) -> np.ndarray:
        return _cost(self.states) / (4.0 * self.states.shape[1])


def _cost(states: np.ndarray) -> np.ndarray:
    lut = np.zeros(5)
    for s, c in COST.items():
        lut[s] = c
    return lut[np.asarray(states)].sum(axis=1)


class TableEnv:
    """Episodes read from a :class:`~dashskip.oracle.PathTable` (frozen model only).

    ``approximate=True`` feeds the scorer ``scale_i * h_in`` (the scaled input of
    layer ``i``) instead of the true output, mirroring the overlapped pipeline.
    """

    def __init__(self, table, scales=None, approximate: bool = False, reward_cfg: RewardConfig | None = None):
        self.table = table
        self.scales = scales
        self.approximate = approximate
        self.reward_cfg = reward_cfg or RewardConfig()
        self.n = len(table.split)
        self.n_layers = table.n_layers
        full_leaf = table.leaf_id([4] * table.n_layers)
        self._ppl_full = np.exp(table.nll[full_leaf])

    def rollout(self, params: ScorerParams, idx: np.ndarray, *, greedy: bool, tau: float = 1.0,
                rng: np.random.Generator | None = None) -> Episodes:
        t = self.table
        L = self.n_layers
        b = len(idx)
        states = np.full((b, L), 4, dtype=np.int64)
        actions = np.zeros((b, L - 2), dtype=np.int64)
        caches = []
        pid = np.zeros(b, dtype=np.int64)
        prev = pid
        for i in range(1, L - 1):
            if self.approximate:
                H = scale_of(self.scales, i) * t.pooled[i - 1][prev, idx]
            else:
                H = t.pooled[i][pid, idx]
            cache = scorer_forward(params, H, i, states[:, i - 1])
            if greedy:
                nxt = greedy_states(cache.scores, params.allowed_states)
                a = np.array([STATE_INDEX[int(s)] for s in nxt])
            else:
                nxt, a = sample_states(cache.scores, tau, rng, params.allowed_states)
            states[:, i] = nxt
            actions[:, i - 1] = a
            caches.append(cache)
            prev = pid
            pid = pid * 4 + a
        nll = t.nll[pid, idx]
        if t.correct is not None:
            correct = t.correct[pid, idx]
            r_acc = np.where(correct, 1.0, -1.0)
        else:
            correct = None
            r_acc = acc_reward_perplexity(self._ppl_full[idx], np.exp(nll), self.reward_cfg)
        return Episodes(states, caches, actions, np.atleast_1d(r_acc), correct, nll)


class LiveEnv:
    """Episodes produced by running the model; supports co-training."""

    def __init__(self, model: ToyModel, split: Split, scales=None, approximate: bool = False,
                 reward_cfg: RewardConfig | None = None):
        self.model = model
        self.split = split
        self.scales = scales
        self.approximate = approximate
        self.reward_cfg = reward_cfg or RewardConfig()
        self.n = len(split)
        self.n_layers = model.n_layers

    def rollout(self, params: ScorerParams, idx: np.ndarray, *, greedy: bool, tau: float = 1.0,
                rng: np.random.Generator | None = None, grad: bool = False) -> Episodes:
        from .runtime import batched_rollout

        tok = as_tokens(self.split.tokens[idx])
        ro = batched_rollout(self.model, params, tok, self.scales, greedy=greedy, tau=tau, rng=rng,
                             approximate=self.approximate, grad=grad)
        if self.split.labels is not None:
            labels = torch.as_tensor(self.split.labels[idx])
            ce_t = F.cross_entropy(ro.logits[:, -1, :], labels, reduction="none")
            cand = None if self.split.candidates is None else self.split.candidates[idx]
            correct = predict_labels(ro.logits, cand) == self.split.labels[idx]
            r_acc = np.where(correct, 1.0, -1.0)
        else:
            ce_t = sequence_nll(ro.logits, tok)
            correct = None
            with torch.no_grad():
                full = sequence_nll(self.model.forward_with_path(tok, [4] * self.n_layers, self.scales), tok)
            r_acc = acc_reward_perplexity(np.exp(full.numpy()), np.exp(ce_t.detach().numpy()), self.reward_cfg)
        return Episodes(ro.states, ro.caches, ro.actions, np.atleast_1d(r_acc), correct,
                        ce_t.detach().numpy(), ce_t.mean() if grad else None)


# -- training --------------------------------------------------------------------------


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ScorerTrainConfig:
    steps: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    clip: float = 1.0
    tau0: float = 1.0
    alpha_decay: float = 0.01
    tau_min: float = 0.05
    baseline: bool = True
    mode: str = "frozen"  # or "cotrain"
    model_lr: float = 1e-4
    seed: int = 0
    log_every: int = 10
    divergence_factor: float = 10.0
    divergence_window: int = 100
    divergence_floor: float = 0.5  # |L_all| below this never counts as a growth baseline

    def __post_init__(self):
        if self.mode not in ("frozen", "cotrain"):
            raise ValueError("mode must be 'frozen' or 'cotrain'")


LOG_FIELDS = ("step", "loss_ce", "loss_rl", "mean_cost_ratio", "accuracy", "tau")


@dataclass
class StepStats:
    step: int
    loss_ce: float
    loss_rl: float
    mean_cost_ratio: float
    accuracy: float
    tau: float
    loss_all: float
    mean_r_eff: float

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_FIELDS}


def joint_train_step(model: ToyModel, params: ScorerParams, env, idx: np.ndarray, reward_cfg: RewardConfig,
                     train_cfg: ScorerTrainConfig, step: int, rng: np.random.Generator,
                     model_opt: torch.optim.Optimizer | None = None) -> tuple[ScorerParams, StepStats]:
    """One update of ``L_all = L_CE + lam * L_RL``.

    In frozen mode only the scorer moves (the CE term has no scorer gradient
    because the path is discrete). In co-training mode ``model_opt`` also
    steps the base model on the CE of the sampled paths.
    """
    tc = train_cfg
    tau = temperature(step, tc.tau0, tc.alpha_decay, tc.tau_min)
    cotrain = tc.mode == "cotrain"
    if cotrain:
        ep = env.rollout(params, idx, greedy=False, tau=tau, rng=rng, grad=True)
    else:
        ep = env.rollout(params, idx, greedy=False, tau=tau, rng=rng)
    rewards = episode_rewards(ep.states, ep.r_acc, reward_cfg.beta)
    adv = rewards - rewards.mean(axis=0, keepdims=True) if tc.baseline else rewards
    loss_rl = reinforce_loss(params, ep.caches, ep.actions, adv, tau)
    loss_ce = float(ep.ce.mean())
    new_params = params
    if reward_cfg.lam > 0:
        g = reinforce_grad(params, ep.caches, ep.actions, adv, tau).scaled(reward_cfg.lam)
        new_params = sgd_update(params, clip_grad(g, tc.clip), tc.lr)
    if cotrain:
        if model_opt is None:
            raise ValueError("co-training needs a model optimizer")
        model_opt.zero_grad()
        ep.ce_tensor.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip)
        model_opt.step()
    acc = float(ep.correct.mean()) if ep.correct is not None else float("nan")
    r_eff = efficiency_reward(ep.states[:, 1:-1], reward_cfg.beta).sum(axis=1).mean()
    stats = StepStats(step, loss_ce, loss_rl, float(ep.cost_ratio.mean()), acc, tau,
                      loss_ce + reward_cfg.lam * loss_rl, float(r_eff))
    return new_params, stats


@dataclass
class TrainResult:
    params: ScorerParams
    history: list[StepStats] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)


def _check_divergence(history: list[StepStats], cfg: ScorerTrainConfig) -> None:
    cur = history[-1].loss_all
    if not math.isfinite(cur):
        raise TrainingDivergence(f"non-finite loss at step {history[-1].step}")
    w = cfg.divergence_window
    if len(history) <= w:
        return
    # compare short running means of |L_all| that are `w` steps apart
    k = 10
    now = np.mean([abs(s.loss_all) for s in history[-k:]])
    then = np.mean([abs(s.loss_all) for s in history[-w - k:-w]])
    if now > cfg.divergence_factor * max(then, cfg.divergence_floor):
        raise TrainingDivergence(
            f"|L_all| grew from {then:.4g} to {now:.4g} within {w} steps (step {history[-1].step})")


def train_scorer(model: ToyModel, params: ScorerParams, env, reward_cfg: RewardConfig,
                 train_cfg: ScorerTrainConfig, log_path=None, header_comment: str = "") -> TrainResult:
    """Train the scorer with REINFORCE on episodes from ``env``.

    ``env`` is a :class:`TableEnv` (fast, frozen model) or :class:`LiveEnv`.
    Raises :class:`TrainingDivergence` when the divergence guard trips.
    """
    tc = train_cfg
    rng = np.random.default_rng(tc.seed)
    model_opt = None
    if tc.mode == "cotrain":
        if not isinstance(env, LiveEnv):
            raise ValueError("co-training needs a LiveEnv")
        model.train()
        model_opt = torch.optim.SGD(model.parameters(), lr=tc.model_lr)
    history: list[StepStats] = []
    rows = []
    try:
        for step in range(tc.steps):
            idx = rng.integers(0, env.n, size=tc.batch_size)
            params, stats = joint_train_step(model, params, env, idx, reward_cfg, tc, step, rng, model_opt)
            history.append(stats)
            _check_divergence(history, tc)
            if step % tc.log_every == 0 or step == tc.steps - 1:
                rows.append(stats.row())
                log.debug("scorer step %d cost %.3f acc %.3f tau %.3f", step, stats.mean_cost_ratio,
                          stats.accuracy, stats.tau)
    finally:
        if model_opt is not None:
            model.eval()
    if log_path is not None:
        write_training_log(log_path, rows, header_comment)
    return TrainResult(params, history, rows)


def write_training_log(path, rows: list[dict], header_comment: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def greedy_cost_ratio(params: ScorerParams, env, batch_size: int = 4096) -> tuple[float, float]:
    """Mean greedy cost ratio and quality over every episode of ``env``."""
    costs, qual = [], []
    for lo in range(0, env.n, batch_size):
        idx = np.arange(lo, min(env.n, lo + batch_size))
        ep = env.rollout(params, idx, greedy=True)
        costs.append(ep.cost_ratio)
        qual.append(ep.correct.astype(float) if ep.correct is not None else -np.exp(ep.ce))
    return float(np.concatenate(costs).mean()), float(np.concatenate(qual).mean())


# -- budget controller ---------------------------------------------------------------------


@dataclass
class BetaSearchResult:
    target_ratio: float  # target cost ratio (1 / speedup)
    beta: float
    achieved_ratio: float
    quality: float
    attained: bool
    params: ScorerParams
    probes: list[tuple[float, float]] = field(default_factory=list)  # (beta, ratio)


def search_beta(model: ToyModel, init: ScorerParams, env, target_ratio: float, reward_cfg: RewardConfig,
                train_cfg: ScorerTrainConfig, measure_env=None, tol: float = 0.01, beta_max: float = 4.0,
                max_probes: int = 32, min_log_gap: float = 1e-4) -> BetaSearchResult:
    """Search ``beta`` until the greedy mean cost ratio is within ``tol``
    (relative) of ``target_ratio``.

    Every probe retrains from ``init`` with the same seed, so the search is
    deterministic. After bracketing, the cost ratio is not guaranteed to be
    monotone in ``beta``, so each step bisects (in log space) the narrowest
    pair of neighbouring probes whose ratios straddle the target. The closest
    probe is returned when the target is missed.
    """
    if not 0 < target_ratio <= 1:
        raise ValueError("target cost ratio must lie in (0, 1]")
    measure_env = measure_env or env
    probes: list[tuple[float, float]] = []
    best = None

    def probe(beta):
        nonlocal best
        cfg = RewardConfig(beta, reward_cfg.lam, reward_cfg.epsilon, reward_cfg.ppl_sign_mode)
        res = train_scorer(model, init.copy(), env, cfg, train_cfg)
        ratio, q = greedy_cost_ratio(res.params, measure_env)
        probes.append((beta, ratio))
        err = abs(ratio - target_ratio) / target_ratio
        if best is None or err < best[0]:
            best = (err, beta, ratio, q, res.params)
        log.info("beta %.5g -> cost ratio %.4f (target %.4f) quality %.4f", beta, ratio, target_ratio, q)
        return ratio

    def done():
        return best[0] <= tol or len(probes) >= max_probes

    if probe(0.0) > target_ratio * (1 + tol):
        b = 0.01
        while b <= beta_max and not done():
            if probe(b) <= target_ratio:
                break
            b *= 4
        tried = set()
        while not done():
            pts = sorted(probes)
            pairs = [(math.log(b1) - math.log(b0) if b0 > 0 else math.inf, b0, b1)
                     for (b0, r0), (b1, r1) in zip(pts, pts[1:])
                     if (r0 - target_ratio) * (r1 - target_ratio) < 0 and (b0, b1) not in tried]
            pairs = [p for p in pairs if p[0] > min_log_gap]
            if not pairs:
                break
            _, b0, b1 = min(pairs)
            tried.add((b0, b1))
            probe(math.sqrt(b0 * b1) if b0 > 0 else b1 / 4)
    err, beta, ratio, q, params = best
    return BetaSearchResult(target_ratio, beta, ratio, q, err <= tol, params, sorted(probes))
