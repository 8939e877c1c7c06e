"""Stable elementwise nonlinearities shared by grids, losses and gradients.

Everything here computes in float64 regardless of input dtype; parameter
storage precision is the caller's concern.
"""
from __future__ import annotations

import numpy as np


def softplus(x):
    """log(1 + e^x), overflow-safe for large positive x."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def sigmoid(x):
    """1 / (1 + e^-x) without overflow on either tail."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_grad(x):
    """d softplus(x) / dx."""
    return sigmoid(x)


def sigmoid_grad(x):
    """d sigmoid(x) / dx."""
    s = sigmoid(x)
    return s * (1.0 - s)


def inv_softplus(y):
    """Inverse of softplus: log(e^y - 1), valid for y > 0.

    Written as y + log(1 - e^-y) so large y does not overflow.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inv_softplus requires strictly positive input")
    return y + np.log(-np.expm1(-y))
