"""Small numerically-stable primitives used across modules."""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-7
PROB_CEIL = 1.0 - 1e-7


def sigmoid(x):
    """Stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow; softplus(-gap) is the BPR rank loss."""
    return np.logaddexp(0.0, x)


def softmax(logits, axis=-1):
    """Max-subtracted softmax; rows of -inf logits receive zero mass."""
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=axis, keepdims=True)
    z = np.exp(logits - m)
    return z / np.sum(z, axis=axis, keepdims=True)


def clamp_prob(p):
    """Clamp probabilities away from {0, 1} before taking logarithms."""
    return np.clip(p, PROB_FLOOR, PROB_CEIL)
