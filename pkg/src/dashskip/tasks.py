"""Synthetic tasks standing in for the benchmark datasets.

Two tasks are provided:

* ``copy``: key/value lookup. The prompt lists ``n_pairs`` distinct keys each
  followed by its value, then repeats one key; the answer is that key's value
  (``hops=1``) or the value found by looking that value up again (``hops=2``).
  It is a single-token classification read off the last position.
* ``markov``: next-token language modelling on text drawn from a random sparse
  Markov chain, scored by perplexity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Split:
    tokens: np.ndarray  # (N, T) int64
    labels: np.ndarray | None = None  # (N,) int64 for classification
    candidates: np.ndarray | None = None  # (N, C) answer options for multiple choice

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Split(self.tokens[idx], pick(self.labels), pick(self.candidates))

    def chance(self, vocab_size: int) -> float:
        """Accuracy of a uniform guess: over the options if any, else the vocabulary."""
        if self.candidates is None:
            return 1.0 / vocab_size
        return float(np.mean([1.0 / len(np.unique(c)) for c in self.candidates]))


@dataclass(frozen=True)
class TaskSpec:
    name: str = "copy"
    vocab_size: int = 16
    n_pairs: int = 4
    hops: int = 1  # copy only: 2 = follow key -> value -> value
    multiple_choice: bool = False  # copy only: score the answer among the prompt's values
    seq_len: int = 16  # markov only
    n_train: int = 4096
    n_val: int = 512
    n_test: int = 512
    seed: int = 0
    accuracy_floor: float = 0.95


@dataclass
class Task:
    spec: TaskSpec
    kind: str  # "classification" or "lm"
    train: Split
    val: Split
    test: Split
    n_classes: int
    extra: dict = field(default_factory=dict)

    @property
    def chance(self) -> float:
        return self.test.chance(self.spec.vocab_size)

    @property
    def seq_len(self) -> int:
        return int(self.train.tokens.shape[1])


def _copy_split(rng: np.random.Generator, n: int, n_pairs: int, n_keys: int) -> Split:
    keys = np.argsort(rng.random((n, n_keys)), axis=1)[:, :n_pairs]
    values = rng.integers(0, n_keys, size=(n, n_pairs)) + n_keys
    tokens = np.empty((n, 2 * n_pairs + 1), dtype=np.int64)
    tokens[:, 0:-1:2] = keys
    tokens[:, 1:-1:2] = values
    which = rng.integers(0, n_pairs, size=n)
    rows = np.arange(n)
    tokens[:, -1] = keys[rows, which]
    labels = values[rows, which].astype(np.int64)
    return Split(tokens, labels)


def _two_hop_split(rng: np.random.Generator, n: int, n_pairs: int, vocab: int) -> Split:
    keys = np.argsort(rng.random((n, vocab)), axis=1)[:, :n_pairs]
    values = rng.integers(0, vocab, size=(n, n_pairs))
    # pair 0 maps the query to pair 1's key, so the answer is values[:, 1]
    values[:, 0] = keys[:, 1]
    order = np.argsort(rng.random((n, n_pairs)), axis=1)
    rows = np.arange(n)[:, None]
    keys_s, values_s = keys[rows, order], values[rows, order]
    tokens = np.empty((n, 2 * n_pairs + 1), dtype=np.int64)
    tokens[:, 0:-1:2] = keys_s
    tokens[:, 1:-1:2] = values_s
    tokens[:, -1] = keys[:, 0]
    return Split(tokens, values[:, 1].astype(np.int64), values_s.astype(np.int64))


def make_copy_task(spec: TaskSpec) -> Task:
    if spec.hops == 2:
        if spec.n_pairs > spec.vocab_size or spec.n_pairs < 2:
            raise ValueError("two-hop copy needs 2 <= n_pairs <= vocab_size")
        rng = np.random.default_rng(spec.seed)
        splits = [_two_hop_split(rng, n, spec.n_pairs, spec.vocab_size)
                  for n in (spec.n_train, spec.n_val, spec.n_test)]
        if not spec.multiple_choice:
            splits = [Split(s.tokens, s.labels) for s in splits]
        return Task(spec, "classification", *splits, n_classes=spec.vocab_size)
    if spec.hops != 1:
        raise ValueError(f"hops must be 1 or 2, got {spec.hops}")
    if spec.vocab_size % 2:
        raise ValueError("copy task needs an even vocabulary (keys | values)")
    n_keys = spec.vocab_size // 2
    if spec.n_pairs > n_keys:
        raise ValueError("n_pairs cannot exceed the number of key symbols")
    rng = np.random.default_rng(spec.seed)
    splits = [_copy_split(rng, n, spec.n_pairs, n_keys) for n in (spec.n_train, spec.n_val, spec.n_test)]
    if spec.multiple_choice:
        splits = [Split(s.tokens, s.labels, s.tokens[:, 1:-1:2].copy()) for s in splits]
    return Task(spec, "classification", *splits, n_classes=n_keys)


def _markov_split(rng, n, seq_len, trans, start):
    v = trans.shape[0]
    tokens = np.empty((n, seq_len), dtype=np.int64)
    tokens[:, 0] = rng.choice(v, size=n, p=start)
    cum = np.cumsum(trans, axis=1)
    for t in range(1, seq_len):
        u = rng.random(n)[:, None]
        tokens[:, t] = np.minimum((u > cum[tokens[:, t - 1]]).sum(axis=1), v - 1)
    return Split(tokens)


def make_markov_task(spec: TaskSpec) -> Task:
    rng = np.random.default_rng(spec.seed)
    v = spec.vocab_size
    trans = rng.dirichlet(np.full(v, 0.2), size=v)
    start = np.full(v, 1.0 / v)
    train = _markov_split(rng, spec.n_train, spec.seq_len, trans, start)
    val = _markov_split(rng, spec.n_val, spec.seq_len, trans, start)
    test = _markov_split(rng, spec.n_test, spec.seq_len, trans, start)
    return Task(spec, "lm", train, val, test, n_classes=v, extra={"transition": trans})


def make_task(spec: TaskSpec) -> Task:
    if spec.name == "copy":
        return make_copy_task(spec)
    if spec.name == "markov":
        return make_markov_task(spec)
    raise ValueError(f"unknown task {spec.name!r}")
