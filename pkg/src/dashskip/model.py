"""Toy pre-norm decoder-only transformer with per-layer execution states.

Each layer can run in one of four states:

====  ===========================================================
code  meaning
====  ===========================================================
0     skipped; the layer output is ``scale_i * h_in``
1     executed with 4-bit fake-quantized weights and matmul inputs
2     executed with 8-bit fake-quantized weights and matmul inputs
4     executed at full (float64) precision
====  ===========================================================

Layer indices in the public API are 1-based. All tensors are float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tasks import Split, Task

log = logging.getLogger(__name__)

DTYPE = torch.float64


class LayerState(IntEnum):
    SKIP = 0
    INT4 = 1
    INT8 = 2
    FULL = 4


STATES: tuple[int, ...] = (0, 1, 2, 4)
STATE_BITS = {1: 4, 2: 8}
# cost units per layer; the state codes double as the cost scale
COST = {0: 0, 1: 1, 2: 2, 4: 4}


def check_state(code) -> int:
    code = int(code)
    if code not in COST:
        raise ValueError(f"unknown layer state {code!r}; expected one of {STATES}")
    return code


def path_cost(path: Sequence[int]) -> int:
    return sum(COST[check_state(s)] for s in path)


def cost_ratio(path: Sequence[int]) -> float:
    return path_cost(path) / (4.0 * len(path))


def path_to_str(path: Sequence[int]) -> str:
    return "".join(str(int(s)) for s in path)


def path_from_str(text: str) -> tuple[int, ...]:
    return tuple(check_state(int(c)) for c in text.strip())


class PathConstraintError(ValueError):
    """The first and last layers must always run at full precision."""


def check_path(path: Sequence[int], n_layers: int) -> tuple[int, ...]:
    path = tuple(check_state(s) for s in path)
    if len(path) != n_layers:
        raise ValueError(f"path has {len(path)} states, model has {n_layers} layers")
    if path[0] != 4 or path[-1] != 4:
        raise PathConstraintError(f"path {path_to_str(path)} must start and end with state 4")
    return path


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 16
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 3:
            raise ValueError("need at least 3 layers so one layer is decidable")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QuantSpec:
    """Symmetric per-tensor integer grid."""

    bits: int

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"only 4- and 8-bit quantization is supported, got {self.bits}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def scale_for(self, max_abs: float) -> float:
        return max_abs / self.qmax


def fake_quantize(values, spec: QuantSpec | int):
    """Quantize-dequantize ``values`` on a symmetric per-tensor grid.

    Works for numpy arrays and torch tensors. The grid step is
    ``max|v| / (2**(bits-1) - 1)``; an all-zero input comes back as zeros.
    """
    if not isinstance(spec, QuantSpec):
        spec = QuantSpec(int(spec))
    if isinstance(values, torch.Tensor):
        amax = values.detach().abs().max()
        if amax == 0:
            return torch.zeros_like(values)
        step = amax / spec.qmax
        return torch.clamp(torch.round(values / step), -spec.qmax, spec.qmax) * step
    v = np.asarray(values, dtype=np.float64)
    amax = np.max(np.abs(v)) if v.size else 0.0
    if amax == 0:
        return np.zeros_like(v)
    step = amax / spec.qmax
    return np.clip(np.round(v / step), -spec.qmax, spec.qmax) * step


def _fq_act(x: torch.Tensor, bits: int | None) -> torch.Tensor:
    """Fake-quantize activations per sequence (leading batch axis)."""
    if bits is None:
        return x
    qmax = 2 ** (bits - 1) - 1
    amax = x.detach().abs().amax(dim=(-2, -1), keepdim=True)
    step = torch.where(amax > 0, amax / qmax, torch.ones_like(amax))
    return torch.clamp(torch.round(x / step), -qmax, qmax) * step


class FlopCounter:
    """Counts multiply-add FLOPs of layer bodies, tagged with their state."""

    def __init__(self):
        self.records: list[tuple[int, int, int]] = []  # (layer, state, flops)

    def add(self, layer: int, state: int, flops: int) -> None:
        self.records.append((layer, state, flops))

    def flops(self, layer: int | None = None) -> int:
        return sum(f for l, _, f in self.records if layer is None or l == layer)

    def cost_units(self) -> int:
        return sum(COST[s] for _, s, _ in self.records)


LAYER_PARAM_NAMES = ("ln1_w", "ln1_b", "wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
                     "ln2_w", "ln2_b", "w1", "b1", "w2", "b2")
QUANT_WEIGHTS = ("wq", "wk", "wv", "wo", "w1", "w2")


class Block(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        z = lambda *s: nn.Parameter(torch.zeros(*s, dtype=DTYPE))
        o = lambda *s: nn.Parameter(torch.ones(*s, dtype=DTYPE))
        self.ln1_w, self.ln1_b = o(d), z(d)
        self.wq, self.wk, self.wv, self.wo = z(d, d), z(d, d), z(d, d), z(d, d)
        self.bq, self.bk, self.bv, self.bo = z(d), z(d), z(d), z(d)
        self.ln2_w, self.ln2_b = o(d), z(d)
        self.w1, self.b1 = z(d, d_ff), z(d_ff)
        self.w2, self.b2 = z(d_ff, d), z(d)


class ToyModel(nn.Module):
    """Decoder-only transformer; weights are stored as ``x @ W`` matrices."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.tok_emb = nn.Parameter(torch.zeros(c.vocab_size, c.d_model, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(c.max_seq_len, c.d_model, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(c.d_model, c.d_ff) for _ in range(c.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(c.d_model, dtype=DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(c.d_model, dtype=DTYPE))
        self.w_out = nn.Parameter(torch.zeros(c.d_model, c.vocab_size, dtype=DTYPE))
        self._qcache: dict[tuple[int, int], tuple] = {}
        self.init_weights(c.seed)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        c = self.config
        with torch.no_grad():
            self.tok_emb.copy_(torch.randn(self.tok_emb.shape, generator=g, dtype=DTYPE) * 0.5)
            self.pos_emb.copy_(torch.randn(self.pos_emb.shape, generator=g, dtype=DTYPE) * 0.5)
            resid_std = 0.02 / math.sqrt(2 * c.n_layers)
            for b in self.blocks:
                for name in ("wq", "wk", "wv", "w1"):
                    w = getattr(b, name)
                    w.copy_(torch.randn(w.shape, generator=g, dtype=DTYPE) / math.sqrt(w.shape[0]))
                for name in ("wo", "w2"):
                    w = getattr(b, name)
                    w.copy_(torch.randn(w.shape, generator=g, dtype=DTYPE) * resid_std)
            self.w_out.copy_(torch.randn(self.w_out.shape, generator=g, dtype=DTYPE) / math.sqrt(c.d_model))
        self._qcache.clear()

    # -- quantized weight variants -------------------------------------------------

    def _weights_version(self, block: Block) -> int:
        return sum(getattr(block, n)._version for n in QUANT_WEIGHTS)

    def quantized_weights(self, layer_index: int, bits: int) -> dict[str, torch.Tensor]:
        """Fake-quantized copies of the layer's matmul weights, rebuilt on change."""
        block = self.blocks[layer_index - 1]
        key = (layer_index, bits)
        ver = self._weights_version(block)
        hit = self._qcache.get(key)
        if hit is None or hit[0] != ver or hit[1] is not block.wq.data:
            spec = QuantSpec(bits)
            with torch.no_grad():
                qw = {n: fake_quantize(getattr(block, n).detach(), spec) for n in QUANT_WEIGHTS}
            self._qcache[key] = (ver, block.wq.data, qw)
            hit = self._qcache[key]
        return hit[2]

    # -- building blocks -----------------------------------------------------------

    def embed(self, tokens) -> torch.Tensor:
        tokens = as_tokens(tokens)
        t = tokens.shape[1]
        if t > self.config.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        return self.tok_emb[tokens] + self.pos_emb[:t]

    def head(self, h: torch.Tensor) -> torch.Tensor:
        x = F.layer_norm(h, (h.shape[-1],), self.lnf_w, self.lnf_b)
        return x @ self.w_out

    def block_body(self, h: torch.Tensor, layer_index: int, bits: int | None = None,
                   counter: FlopCounter | None = None, state: int = 4) -> torch.Tensor:
        """Run transformer block ``layer_index`` on ``h`` of shape (B, T, d)."""
        b = self.blocks[layer_index - 1]
        if bits is None:
            wq, wk, wv, wo, w1, w2 = b.wq, b.wk, b.wv, b.wo, b.w1, b.w2
        else:
            qw = self.quantized_weights(layer_index, bits)
            wq, wk, wv, wo, w1, w2 = (qw[n] for n in QUANT_WEIGHTS)
        c = self.config
        bsz, t, d = h.shape
        nh, dh = c.n_heads, d // c.n_heads

        x = _fq_act(F.layer_norm(h, (d,), b.ln1_w, b.ln1_b), bits)
        q = (x @ wq + b.bq).view(bsz, t, nh, dh).transpose(1, 2)
        k = (x @ wk + b.bk).view(bsz, t, nh, dh).transpose(1, 2)
        v = (x @ wv + b.bv).view(bsz, t, nh, dh).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        o = (att @ v).transpose(1, 2).reshape(bsz, t, d)
        h = h + _fq_act(o, bits) @ wo + b.bo

        x = _fq_act(F.layer_norm(h, (d,), b.ln2_w, b.ln2_b), bits)
        f = F.gelu(x @ w1 + b.b1)
        h = h + _fq_act(f, bits) @ w2 + b.b2

        if counter is not None:
            fl = bsz * (4 * 2 * t * d * d + 2 * 2 * t * t * d + 2 * 2 * t * d * c.d_ff)
            counter.add(layer_index, state, fl)
        return h

    def layer_forward(self, h_in: torch.Tensor, layer_index: int, state: int, scales=None,
                      counter: FlopCounter | None = None) -> torch.Tensor:
        """Execute one layer in the given state.

        ``scales`` is a ScaleTable, a per-layer sequence (1-based lookup on
        ``layer_index``), or None for identity compensation.
        """
        state = check_state(state)
        if not 1 <= layer_index <= self.n_layers:
            raise IndexError(f"layer index {layer_index} outside [1, {self.n_layers}]")
        squeeze = h_in.dim() == 2
        h = h_in.unsqueeze(0) if squeeze else h_in
        if h.shape[-1] != self.config.d_model:
            raise ValueError(f"hidden width {h.shape[-1]} != d_model {self.config.d_model}")
        if state == 0:
            if counter is not None:
                counter.add(layer_index, 0, 0)
            out = h * scale_of(scales, layer_index)
        else:
            out = self.block_body(h, layer_index, STATE_BITS.get(state), counter, state)
        return out.squeeze(0) if squeeze else out

    # -- whole-model passes --------------------------------------------------------

    def reference_forward(self, tokens) -> torch.Tensor:
        """Plain full-precision forward pass with no state machinery."""
        h = self.embed(tokens)
        for i in range(1, self.n_layers + 1):
            h = self.block_body(h, i)
        return self.head(h)

    def forward_with_path(self, tokens, path: Sequence[int], scales=None,
                          counter: FlopCounter | None = None) -> torch.Tensor:
        path = check_path(path, self.n_layers)
        h = self.embed(tokens)
        for i, s in enumerate(path, start=1):
            h = self.layer_forward(h, i, s, scales, counter)
        return self.head(h)

    def forward(self, tokens, path=None, scales=None):
        if path is None:
            return self.reference_forward(tokens)
        return self.forward_with_path(tokens, path, scales)

    def forward_mixed(self, tokens, paths, scales=None) -> torch.Tensor:
        """Forward a batch where row ``b`` follows ``paths[b]``.

        Rows sharing a state at a layer are computed together.
        """
        paths = np.asarray(paths, dtype=np.int64)
        h = self.embed(tokens)
        if paths.shape != (h.shape[0], self.n_layers):
            raise ValueError(f"paths shape {paths.shape} does not match batch/layers")
        for row in paths:
            check_path(row, self.n_layers)
        for i in range(1, self.n_layers + 1):
            h = self.mixed_layer(h, i, paths[:, i - 1], scales)
        return self.head(h)

    def mixed_layer(self, h: torch.Tensor, layer_index: int, states, scales=None) -> torch.Tensor:
        states = np.asarray(states, dtype=np.int64)
        uniq = np.unique(states)
        if len(uniq) == 1:
            return self.layer_forward(h, layer_index, int(uniq[0]), scales)
        out = torch.empty_like(h)
        for s in uniq:
            idx = torch.from_numpy(np.flatnonzero(states == s))
            out[idx] = self.layer_forward(h[idx], layer_index, int(s), scales)
        return out

    def residual_stream(self, tokens, path: Sequence[int] | None = None, scales=None) -> list[torch.Tensor]:
        """Hidden states entering each layer plus the final one (L+1 entries)."""
        path = [4] * self.n_layers if path is None else check_path(path, self.n_layers)
        h = self.embed(tokens)
        out = [h]
        for i, s in enumerate(path, start=1):
            h = self.layer_forward(h, i, s, scales)
            out.append(h)
        return out


def scale_of(scales, layer_index: int) -> float:
    if scales is None:
        return 1.0
    lookup = getattr(scales, "lookup", None)
    if lookup is not None:
        return lookup(layer_index)
    return float(scales[layer_index - 1])


def as_tokens(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2 or t.shape[1] == 0:
        raise ValueError(f"expected tokens of shape (B, T), got {tuple(t.shape)}")
    return t


# -- evaluation ---------------------------------------------------------------------


def predict_labels(logits: torch.Tensor, candidates=None) -> np.ndarray:
    """Argmax at the last position, restricted to ``candidates`` when given."""
    last = logits[:, -1, :].detach()
    if candidates is not None:
        cand = torch.as_tensor(np.asarray(candidates), dtype=torch.long)
        masked = torch.full_like(last, float("-inf"))
        masked.scatter_(1, cand, last.gather(1, cand))
        last = masked
    return last.argmax(dim=-1).numpy()


@torch.no_grad()
def accuracy(model: ToyModel, split: Split, path=None, scales=None, batch_size: int = 1024) -> float:
    """Last-position classification accuracy of ``split`` under ``path``."""
    return float(np.mean(correct_mask(model, split, path, scales, batch_size)))


@torch.no_grad()
def correct_mask(model: ToyModel, split: Split, path=None, scales=None, batch_size: int = 1024) -> np.ndarray:
    if split.labels is None:
        raise ValueError("split has no labels")
    if path is None:
        path = [4] * model.n_layers
    out = []
    for lo in range(0, len(split), batch_size):
        logits = model.forward_with_path(split.tokens[lo:lo + batch_size], path, scales)
        cand = None if split.candidates is None else split.candidates[lo:lo + batch_size]
        out.append(predict_labels(logits, cand) == split.labels[lo:lo + batch_size])
    return np.concatenate(out)


def sequence_nll(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood per sequence, shape (B,)."""
    logp = logits[:, :-1].log_softmax(dim=-1)
    tgt = tokens[:, 1:]
    return -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1).mean(dim=-1)


@torch.no_grad()
def perplexity(model: ToyModel, path, tokens, scales=None) -> float:
    """exp of the mean next-token NLL over all positions of ``tokens``."""
    tokens = as_tokens(tokens)
    if tokens.shape[1] < 2:
        raise ValueError("perplexity needs sequences of length >= 2")
    if path is None:
        path = [4] * model.n_layers
    logits = model.forward_with_path(tokens, path, scales)
    return float(torch.exp(sequence_nll(logits, tokens).mean()))


def perplexity_from_logprobs(logprobs) -> float:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("empty sequence")
    return float(np.exp(-lp.mean()))


# -- base training -----------------------------------------------------------------


class TrainingError(RuntimeError):
    """Base training failed to reach the task's quality floor."""


@dataclass(frozen=True)
class BaseTrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    eval_every: int = 250
    ppl_slack: float = 1.15  # LM floor: val ppl <= slack * true-chain ppl


def task_loss(model: ToyModel, task: Task, tokens: torch.Tensor, labels) -> torch.Tensor:
    logits = model.reference_forward(tokens)
    if task.kind == "classification":
        return F.cross_entropy(logits[:, -1, :], torch.as_tensor(labels))
    return sequence_nll(logits, tokens).mean()


def markov_reference_ppl(task: Task, split: Split) -> float:
    trans = task.extra["transition"]
    toks = split.tokens
    lp = np.log(trans[toks[:, :-1], toks[:, 1:]])
    return float(np.exp(-lp.mean()))


def validation_quality(model: ToyModel, task: Task) -> float:
    if task.kind == "classification":
        return accuracy(model, task.val)
    return perplexity(model, None, task.val.tokens)


def train_base_model(config: ModelConfig, task: Task, train_cfg: BaseTrainConfig | None = None) -> ToyModel:
    """Train the toy model on ``task`` deterministically from ``config.seed``.

    Raises TrainingError if the validation floor is not met within the step
    budget (accuracy floor for classification, perplexity ceiling for LM).
    """
    tc = train_cfg or BaseTrainConfig()
    if task.train.tokens.max() >= config.vocab_size:
        raise ValueError("task vocabulary exceeds model vocab_size")
    torch.manual_seed(config.seed)
    model = ToyModel(config)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=tc.lr, total_steps=tc.steps, pct_start=0.1)
    rng = np.random.default_rng(config.seed)
    train = task.train
    history = []
    for step in range(1, tc.steps + 1):
        idx = rng.integers(0, len(train), size=tc.batch_size)
        tokens = torch.as_tensor(train.tokens[idx])
        labels = None if train.labels is None else train.labels[idx]
        loss = task_loss(model, task, tokens, labels)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % tc.eval_every == 0 or step == tc.steps:
            q = validation_quality(model, task)
            history.append((step, loss.item(), q))
            log.info("base step %d loss %.4f val %.4f", step, loss.item(), q)
    model.eval()
    q = validation_quality(model, task)
    if task.kind == "classification":
        ok = q >= task.spec.accuracy_floor
        floor = f"accuracy >= {task.spec.accuracy_floor}"
    else:
        ceiling = tc.ppl_slack * markov_reference_ppl(task, task.val)
        ok = q <= ceiling
        floor = f"perplexity <= {ceiling:.4f}"
    if not ok:
        raise TrainingError(f"base model did not reach {floor} after {tc.steps} steps "
                            f"(final {q:.4f}; history {history[-4:]})")
    return model
