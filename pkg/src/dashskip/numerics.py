"""Shared float64 math: similarity, activations, softmax.

Everything here works on plain numpy arrays in float64 and is used both by the
runtime and as the substrate for the test oracles.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ZeroNormError(ValueError):
    """Raised when a cosine similarity is requested for a zero vector."""


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def cosine_similarity(x, y) -> float:
    """Cosine of the angle between ``x`` and ``y``.

    Raises ZeroNormError if either input has zero norm rather than returning
    0 or NaN.
    """
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    mx = np.max(np.abs(x))
    my = np.max(np.abs(y))
    if mx == 0.0 or my == 0.0:
        raise ZeroNormError("cosine similarity undefined for a zero-norm vector")
    # rescale by max-abs first so neither the norms nor the dot product overflow
    x = x / mx
    y = y / my
    c = float(np.dot(x / np.linalg.norm(x), y / np.linalg.norm(y)))
    return min(1.0, max(-1.0, c))


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF.

    Accepts scalars or arrays; the tanh approximation is deliberately not used.
    """
    x = np.asarray(x, dtype=np.float64)
    # erfc keeps full relative precision in the left tail, where 1 + erf cancels
    out = 0.5 * x * erfc(-x / SQRT2)
    return float(out) if out.ndim == 0 else out


def gelu_grad(x):
    """Derivative of exact GELU: ``Phi(x) + x * phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * erfc(-x / SQRT2)
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    out = cdf + x * pdf
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def softmax_with_temperature(scores, tau: float, axis: int = -1) -> np.ndarray:
    """Softmax of ``scores / tau`` along ``axis``, stabilised by max-subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    z = s / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_with_temperature(scores, tau: float, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(scores, dtype=np.float64) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
