"""AdamW with a cosine learning-rate schedule that anneals to zero."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import TrainConfig


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def cosine_lr(base: float, step: int, total: int) -> float:
    """Learning rate for the ``step``-th update (0-based) out of ``total``."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def decays(name: str, arr: np.ndarray) -> bool:
    # embeddings and weight matrices decay; biases and norm parameters do not
    return arr.ndim >= 2


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig,
               total_steps: int) -> float:
    """Apply one decoupled-weight-decay Adam update in place; returns the lr used."""
    lr = cosine_lr(cfg.lr, state.step, total_steps)
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name].astype(np.float64) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name].astype(np.float64) + (1.0 - cfg.beta2) * g * g
        # moments are stored float32; update from the stored values so a resumed run matches
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        m = state.m[name].astype(np.float64)
        v = state.v[name].astype(np.float64)
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p64 = p.astype(np.float64)
        if decays(name, p):
            upd = upd + cfg.weight_decay * p64
        params[name] = (p64 - lr * upd).astype(np.float32)
    return lr
