"""Seeded mini-batch training with AdamW and interval loss logging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .layout import Example, permute_entities
from .objective import loss_and_grads
from .optim import AdamState, adamw_step
from .params import TrainConfig, init_params

log = logging.getLogger(__name__)

LOSS_KEYS = ("lm", "dice", "bce", "proj", "total")


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite; training must stop."""


@dataclass
class TrainResult:
    params: dict
    state: AdamState
    records: list = field(default_factory=list)


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def epoch_view(ex: Example, seed: int, epoch: int, index: int) -> Example:
    """The entity-shuffled copy of example ``index`` used during ``epoch``."""
    perm = np.random.default_rng([seed, 3, epoch, index]).permutation(ex.n_entities)
    return permute_entities(ex, perm)


def train_step(params: dict, state: AdamState, examples: Sequence[Example], cfg: TrainConfig,
               total_steps: int, pad_id: int = 0):
    """One teacher-forced update in place; returns ``(LossBundle, lr)``."""
    bundle, grads, _ = loss_and_grads(params, examples, cfg, pad_id)
    if not bundle.is_finite() or not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericError(f"non-finite loss or gradient at step {state.step}: {bundle.as_dict()}")
    lr = adamw_step(params, grads, state, cfg, total_steps)
    return bundle, lr


def train(examples: Sequence[Example], cfg: TrainConfig, vocab_size: int, *,
          params: Optional[dict] = None, state: Optional[AdamState] = None, pad_id: int = 0,
          on_record: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, resuming from ``state.step`` if given.

    Each epoch visits the examples in the order ``epoch_order(seed, epoch)``,
    optionally with every entity prefix reshuffled by :func:`epoch_view`;
    a resumed run therefore replays exactly the batches an uninterrupted run
    would have seen. Loss records average every component over the steps of
    one logging interval (``cfg.log_every`` steps, or one epoch when 0).
    """
    if not examples:
        raise ValueError("cannot train on an empty corpus")
    if params is None:
        params = init_params(cfg, vocab_size)
    if state is None:
        state = AdamState.zeros_like(params)
    n = len(examples)
    spe = steps_per_epoch(n, cfg.batch)
    total = cfg.epochs * spe
    records = []
    acc = {k: 0.0 for k in LOSS_KEYS}
    acc_n = 0

    def flush(epoch, lr):
        nonlocal acc, acc_n
        if acc_n:
            rec = {"epoch": epoch, "step": state.step, "lr": lr, "steps": acc_n}
            rec.update({k: acc[k] / acc_n for k in LOSS_KEYS})
            records.append(rec)
            log.info("step %d epoch %d total %.4f", state.step, epoch, rec["total"])
            if on_record is not None:
                on_record(rec)
        acc = {k: 0.0 for k in LOSS_KEYS}
        acc_n = 0

    lr = cfg.lr
    while state.step < total:
        epoch, k = divmod(state.step, spe)
        order = epoch_order(cfg.seed, epoch, n)
        idx = order[k * cfg.batch : (k + 1) * cfg.batch]
        if cfg.shuffle_entities:
            chunk = [epoch_view(examples[i], cfg.seed, epoch, int(i)) for i in idx]
        else:
            chunk = [examples[i] for i in idx]
        bundle, lr = train_step(params, state, chunk, cfg, total, pad_id)
        for key, val in bundle.as_dict().items():
            acc[key] += val
        acc_n += 1
        end_of_epoch = state.step % spe == 0
        if (cfg.log_every and state.step % cfg.log_every == 0) or (not cfg.log_every and end_of_epoch):
            flush(epoch, lr)
    flush(max(total - 1, 0) // spe if spe else 0, lr)
    return TrainResult(params, state, records)
