"""Straight-line re-implementations used as test oracles.

Nothing here imports the package's math: the transformer is rewritten in
numpy with ``math.erf`` GELU, and the scorer and reward formulas are written
out element by element.
"""

from __future__ import annotations

import math

import numpy as np

STATES = (0, 1, 2, 4)
_erf = np.vectorize(math.erf)


def gelu(x):
    return 0.5 * x * (1.0 + _erf(np.asarray(x) / math.sqrt(2.0)))


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def numpy_weights(model):
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def block(w, i, h, n_heads):
    """Full-precision transformer block ``i`` (0-based) on one sequence (T, d)."""
    p = lambda n: w[f"blocks.{i}.{n}"]
    t, d = h.shape
    dh = d // n_heads
    x = layer_norm(h, p("ln1_w"), p("ln1_b"))
    q, k, v = x @ p("wq") + p("bq"), x @ p("wk") + p("bk"), x @ p("wv") + p("bv")
    out = np.zeros_like(h)
    for head in range(n_heads):
        sl = slice(head * dh, (head + 1) * dh)
        for a in range(t):
            logits = np.array([q[a, sl] @ k[c, sl] / math.sqrt(dh) for c in range(a + 1)])
            e = np.exp(logits - logits.max())
            att = e / e.sum()
            out[a, sl] = sum(att[c] * v[c, sl] for c in range(a + 1))
    h = h + out @ p("wo") + p("bo")
    x = layer_norm(h, p("ln2_w"), p("ln2_b"))
    return h + gelu(x @ p("w1") + p("b1")) @ p("w2") + p("b2")


def residual_stream(w, tokens, n_layers, n_heads):
    h = w["tok_emb"][tokens] + w["pos_emb"][: len(tokens)]
    out = [h]
    for i in range(n_layers):
        h = block(w, i, h, n_heads)
        out.append(h)
    return out


def scale_table(model, calib):
    """Mean over every calibration token of ||Y_i|| / ||X_i|| per layer."""
    w = numpy_weights(model)
    c = model.config
    sums = [0.0] * c.n_layers
    count = 0
    for seq in np.atleast_2d(calib):
        hs = residual_stream(w, np.asarray(seq), c.n_layers, c.n_heads)
        for i in range(c.n_layers):
            for x, y in zip(hs[i], hs[i + 1]):
                sums[i] += math.sqrt(sum(v * v for v in y)) / math.sqrt(sum(v * v for v in x))
        count += len(seq)
    return [s / count for s in sums]


def score_candidates(W1, W2, W3, E, alpha, h, layer, s_cur):
    x = list(h) + list(E[layer]) + list(E[layer + 1])
    a1 = [float(gelu(sum(x[r] * W1[r, j] for r in range(len(x))))) for j in range(W1.shape[1])]
    a2 = [float(gelu(sum(a1[r] * W2[r, j] for r in range(len(a1))))) for j in range(W2.shape[1])]
    base = [sum(a2[r] * W3[r, j] for r in range(len(a2))) for j in range(W3.shape[1])]
    if len(base) == 1:
        base = base * 4
    return [base[k] - alpha * (s - s_cur) for k, s in enumerate(STATES)]


def position_weight(states, l):
    L = len(states)
    total = float(sum(states))
    prefix = float(sum(states[:l]))
    z = states[l - 1] - 4.0 * L / total
    return (total - prefix) / total * (1.0 / (1.0 + math.exp(-z)))


def efficiency_reward(s, beta):
    return beta * (4 - s)


def step_reward(r_acc, omega, r_eff):
    return r_acc * omega + r_eff


def acc_reward_perplexity(ppl_full, ppl_skip, eps, literal=False):
    gap = abs(ppl_full + ppl_skip) if literal else abs(ppl_full - ppl_skip)
    return (eps - gap) / ppl_full


def central_differences(loss, params, h=1e-5):
    """Central finite differences of ``loss(params)`` for every array coordinate."""
    out = {}
    arrays = params.arrays()
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (loss(params.with_arrays(plus)) - loss(params.with_arrays(minus))) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all coordinates.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    difference noise by a vanishing magnitude.
    """
    worst = 0.0
    for name, n in numeric.items():
        a = analytic[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max()))
    return worst
