"""Hybrid mask/box supervision with analytic gradients.

Each loss takes a predicted probability raster and a target and returns
``(loss, dloss/dpred)`` in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .masks import BinaryMask, Box, SoftMask

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7

W_LM = 1.0
W_DICE = 1.0
W_BCE = 0.1
W_PROJ = 1.0


class LossError(ValueError):
    pass


def _pred(p) -> np.ndarray:
    return np.asarray(p.probs if isinstance(p, SoftMask) else p, dtype=np.float64)


def _gt(g) -> np.ndarray:
    return np.asarray(g.bits if isinstance(g, BinaryMask) else g, dtype=np.float64)


def _same(p: np.ndarray, g: np.ndarray):
    if p.shape != g.shape:
        raise LossError(f"prediction {p.shape} and target {g.shape} differ in shape")


def _dice(p: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray]:
    num = 2.0 * (p * g).sum() + DICE_EPS
    den = p.sum() + g.sum() + DICE_EPS
    loss = 1.0 - num / den
    grad = -(2.0 * g * den - num) / (den * den)
    return float(loss), grad


def dice_loss(pred: Union[SoftMask, np.ndarray], gt: Union[BinaryMask, np.ndarray]):
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``."""
    p, g = _pred(pred), _gt(gt)
    _same(p, g)
    return _dice(p, g)


def bce_loss(pred: Union[SoftMask, np.ndarray], gt: Union[BinaryMask, np.ndarray]):
    """Pixel-mean binary cross-entropy on predictions clamped to [delta, 1 - delta]."""
    p, g = _pred(pred), _gt(gt)
    _same(p, g)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)).mean()
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (pc - g) / (pc * (1.0 - pc)), 0.0) / n
    return float(loss), grad


def projection_loss(pred: Union[SoftMask, np.ndarray], gt: Box):
    """Mean of 1-D dice losses between axis max-projections and the box extents.

    The max routes its subgradient to the first maximal pixel of each
    column (for the x axis) and each row (for the y axis).
    """
    p = _pred(pred)
    h, w = p.shape
    if not isinstance(gt, Box):
        raise LossError("projection loss needs a Box target")
    if gt.x1 > w or gt.y1 > h:
        raise LossError(f"box {gt.as_list()} exceeds the {h}x{w} raster")
    gx = np.zeros(w)
    gx[gt.x0 : gt.x1] = 1.0
    gy = np.zeros(h)
    gy[gt.y0 : gt.y1] = 1.0

    col_arg = p.argmax(axis=0)
    row_arg = p.argmax(axis=1)
    px = p[col_arg, np.arange(w)]
    py = p[np.arange(h), row_arg]
    lx, dx = _dice(px, gx)
    ly, dy = _dice(py, gy)

    grad = np.zeros_like(p)
    np.add.at(grad, (col_arg, np.arange(w)), 0.5 * dx)
    np.add.at(grad, (np.arange(h), row_arg), 0.5 * dy)
    return 0.5 * (lx + ly), grad


@dataclass
class PhraseLoss:
    """Grounding losses of a single phrase; ``None`` where unsupervised."""

    dice: Optional[float] = None
    bce: Optional[float] = None
    proj: Optional[float] = None


@dataclass
class LossBundle:
    lm: float = 0.0
    dice: float = 0.0
    bce: float = 0.0
    proj: float = 0.0
    weights: dict = field(default_factory=lambda: {
        "lm": W_LM, "dice": W_DICE, "bce": W_BCE, "proj": W_PROJ})

    @property
    def total(self) -> float:
        w = self.weights
        return (w["lm"] * self.lm + w["dice"] * self.dice
                + w["bce"] * self.bce + w["proj"] * self.proj)

    def as_dict(self) -> dict:
        return {"lm": self.lm, "dice": self.dice, "bce": self.bce,
                "proj": self.proj, "total": self.total}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def total_loss(lm: float, phrases: Iterable[PhraseLoss],
               weights: Optional[dict] = None) -> LossBundle:
    """Average each grounding component over the phrases that carry it."""
    sums = {"dice": 0.0, "bce": 0.0, "proj": 0.0}
    counts = {"dice": 0, "bce": 0, "proj": 0}
    for ph in phrases:
        has_mask = ph.dice is not None or ph.bce is not None
        if has_mask and ph.proj is not None:
            raise LossError("a phrase cannot carry both mask and box supervision")
        for k in sums:
            v = getattr(ph, k)
            if v is not None:
                sums[k] += v
                counts[k] += 1
    bundle = LossBundle(lm=float(lm), **{k: (sums[k] / counts[k] if counts[k] else 0.0)
                                         for k in sums})
    if weights is not None:
        bundle.weights = {**bundle.weights, **weights}
    return bundle

