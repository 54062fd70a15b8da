"""Layer redundancy measurements on a trained model.

* input/output cosine similarity per layer and sample,
* similarity between the hidden states entering consecutive layers,
* accuracy as the most input/output-similar layers are statically skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ToyModel, as_tokens
from .tasks import Split


@dataclass(frozen=True)
class SimilarityProfile:
    mean: np.ndarray  # (L,)
    std: np.ndarray  # (L,)
    per_sample: np.ndarray  # (N, L)
    sample_ids: np.ndarray  # (N,)
    per_token: np.ndarray | None = None  # (N, L, T)

    @property
    def n_layers(self) -> int:
        return int(self.mean.shape[0])

    def rows(self):
        for j, sid in enumerate(self.sample_ids):
            for i in range(self.n_layers):
                yield i + 1, int(sid), float(self.per_sample[j, i])


def _cosine_rows(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Row-wise cosine along the last axis; errors on zero-norm rows."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity undefined for a zero-norm hidden state")
    c = (a * b).sum(dim=-1) / (na * nb)
    return c.clamp(-1.0, 1.0).numpy()


def _profile(pairs, sample_ids) -> SimilarityProfile:
    per_sample = np.stack([_cosine_rows(x.mean(dim=1), y.mean(dim=1)) for x, y in pairs], axis=1)
    per_token = np.stack([_cosine_rows(x, y) for x, y in pairs], axis=1)
    return SimilarityProfile(per_sample.mean(axis=0), per_sample.std(axis=0), per_sample,
                             np.asarray(sample_ids), per_token)


@torch.no_grad()
def io_similarity_profile(model: ToyModel, inputs) -> SimilarityProfile:
    """Cosine between each layer's mean-pooled input and output hidden states."""
    tokens = as_tokens(inputs)
    hs = model.residual_stream(tokens)
    return _profile(list(zip(hs[:-1], hs[1:])), np.arange(tokens.shape[0]))


@torch.no_grad()
def adjacent_similarity_profile(model: ToyModel, inputs) -> SimilarityProfile:
    """Cosine between the hidden states entering layer ``i`` and layer ``i+1``.

    Entry ``i`` (1-based) compares the stream before layer ``i`` with the one
    before layer ``i+1``; for ``i = L`` the second state is the final residual
    stream. In a residual network this coincides with the io profile.
    """
    tokens = as_tokens(inputs)
    hs = model.residual_stream(tokens)
    return _profile([(hs[i], hs[i + 1]) for i in range(model.n_layers)], np.arange(tokens.shape[0]))


def similarity_skip_order(profile: SimilarityProfile) -> list[int]:
    """Decidable layers (2..L-1) sorted by descending mean io similarity."""
    n = profile.n_layers
    layers = list(range(2, n))
    return sorted(layers, key=lambda i: (-profile.mean[i - 1], i))


def static_skip_path(n_layers: int, skipped) -> tuple[int, ...]:
    skipped = set(skipped)
    return tuple(0 if i in skipped else 4 for i in range(1, n_layers + 1))


@dataclass(frozen=True)
class SweepPoint:
    k: int
    skipped: tuple[int, ...]
    accuracy: float


def static_skip_sweep(model: ToyModel, eval_set: Split, max_skips: int,
                      profile: SimilarityProfile | None = None) -> list[SweepPoint]:
    """Skip the top-k most similar layers (no compensation) for k = 0..max_skips."""
    from .oracle import quality

    if max_skips > model.n_layers - 2:
        raise ValueError(f"at most {model.n_layers - 2} layers can be skipped")
    if profile is None:
        profile = io_similarity_profile(model, eval_set.tokens)
    order = similarity_skip_order(profile)
    points = []
    for k in range(max_skips + 1):
        skipped = tuple(sorted(order[:k]))
        q = quality(model, static_skip_path(model.n_layers, skipped), None, eval_set)
        points.append(SweepPoint(k, skipped, q))
    return points


def write_profile_csv(path, profile: SimilarityProfile, header_comment: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f)
        w.writerow(["layer", "sample_id", "similarity"])
        for layer, sid, sim in profile.rows():
            w.writerow([layer, sid, repr(sim)])


def write_sweep_csv(path, points: list[SweepPoint], header_comment: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f)
        w.writerow(["k", "accuracy"])
        for p in points:
            w.writerow([p.k, repr(p.accuracy)])
