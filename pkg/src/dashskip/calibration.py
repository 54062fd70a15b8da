"""Offline per-layer scale factors for skip compensation.

For layer ``i`` the scale is the mean, over every calibration token, of
``||Y|| / ||X||`` where X and Y are the residual-stream vectors entering and
leaving that layer in a full-precision pass. Skipping the layer then
approximates its output as ``scale_i * X``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .model import ToyModel, as_tokens

DEFAULT_CALIB_SIZE = 128


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleTable:
    scales: tuple[float, ...]
    calib_size: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        for s in self.scales:
            if not (math.isfinite(s) and s > 0):
                raise CalibrationError(f"scale factors must be finite and positive, got {s}")

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, idx):
        return self.scales[idx]

    def lookup(self, layer_index: int) -> float:
        return scale_lookup(self, layer_index)

    @classmethod
    def identity(cls, n_layers: int) -> "ScaleTable":
        return cls(tuple([1.0] * n_layers), 0, "identity")

    def to_dict(self) -> dict:
        return {"scales": list(self.scales), "calib_size": self.calib_size,
                "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleTable":
        return cls(tuple(float(s) for s in d["scales"]), int(d["calib_size"]), str(d["fingerprint"]))


def scale_lookup(table: ScaleTable, layer_index: int) -> float:
    if not 1 <= layer_index <= len(table.scales):
        raise IndexError(f"layer index {layer_index} outside [1, {len(table.scales)}]")
    return table.scales[layer_index - 1]


def calibration_fingerprint(tokens) -> str:
    """Order-independent hash of a set of token sequences."""
    rows = sorted(np.asarray(r, dtype=np.int64).tobytes() for r in np.atleast_2d(tokens))
    h = hashlib.sha256()
    for r in rows:
        h.update(hashlib.sha256(r).digest())
    return h.hexdigest()[:16]


@torch.no_grad()
def layer_norm_ratios(model: ToyModel, tokens) -> list[np.ndarray]:
    """Per-token ``||Y_i|| / ||X_i||`` for every layer of one batch.

    Returns L arrays of shape (B, T); entries where ``||X|| == 0`` are NaN.
    """
    hs = model.residual_stream(tokens)
    out = []
    for x, y in zip(hs[:-1], hs[1:]):
        nx = torch.linalg.vector_norm(x, dim=-1)
        ny = torch.linalg.vector_norm(y, dim=-1)
        r = torch.where(nx > 0, ny / torch.where(nx > 0, nx, torch.ones_like(nx)),
                        torch.full_like(nx, float("nan")))
        out.append(r.numpy())
    return out


def compute_scale_table(model: ToyModel, calib) -> ScaleTable:
    """Token-count-weighted mean of per-token norm ratios for each layer.

    Sequences are run one at a time and the ratios summed with ``math.fsum``,
    so the result does not depend on the order of ``calib`` and is unchanged
    when the set is duplicated.
    """
    calib = np.atleast_2d(np.asarray(calib))
    if calib.size == 0 or len(calib) == 0:
        raise CalibrationError("calibration set is empty")
    n_layers = model.n_layers
    per_layer: list[list[float]] = [[] for _ in range(n_layers)]
    skipped = 0
    for seq in calib:
        for i, r in enumerate(layer_norm_ratios(model, as_tokens(seq))):
            flat = r.ravel()
            ok = np.isfinite(flat)
            skipped += int((~ok).sum())
            per_layer[i].extend(flat[ok].tolist())
    if skipped:
        warnings.warn(f"skipped {skipped} zero-norm token inputs during calibration", RuntimeWarning)
    scales = []
    for i, ratios in enumerate(per_layer, start=1):
        if not ratios:
            raise CalibrationError(f"every calibration token had a zero-norm input at layer {i}")
        scales.append(math.fsum(ratios) / len(ratios))
    return ScaleTable(tuple(scales), len(calib), calibration_fingerprint(calib))


def sample_calibration_set(tokens, size: int = DEFAULT_CALIB_SIZE, seed: int = 0) -> np.ndarray:
    tokens = np.asarray(tokens)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(tokens), size=min(size, len(tokens)), replace=False)
    return tokens[np.sort(idx)]
