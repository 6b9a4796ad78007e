"""Numeric building blocks with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)`` and the matching ``*_bwd`` maps the
upstream gradient (plus the cache) to input and parameter gradients. All math
runs in float64.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU."""
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """Derivative of :func:`gelu`; ``t`` is the cached tanh term if available."""
    if t is None:
        t = _gelu_tanh(x)
    x2 = x * x
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x2)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


LN_EPS = 1e-5


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def mlp2_fwd(x, w1, b1, w2, b2):
    """``gelu(x @ w1 + b1) @ w2 + b2`` over the last axis."""
    a = x @ w1 + b1
    t = _gelu_tanh(a)
    h = 0.5 * a * (1.0 + t)
    return h @ w2 + b2, (x, a, t, h, w1, w2)


def mlp2_bwd(dy, cache):
    x, a, t, h, w1, w2 = cache
    red = tuple(range(dy.ndim - 1))
    x2 = x.reshape(-1, x.shape[-1])
    h2 = h.reshape(-1, h.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw2 = h2.T @ dy2
    db2 = dy.sum(axis=red)
    da = (dy @ w2.T) * gelu_grad(a, t)
    da2 = da.reshape(-1, da.shape[-1])
    dw1 = x2.T @ da2
    db1 = da.sum(axis=red)
    dx = da @ w1.T
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
