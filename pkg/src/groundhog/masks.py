"""Raster mask and box algebra.

Masks are row-major ``(height, width)`` numpy arrays wrapped in small frozen
dataclasses. Boxes are half-open integer pixel boxes ``[x0, x1) x [y0, y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class MaskError(ValueError):
    """Raised on malformed masks, boxes or mismatched dimensions."""


class EmptyMaskError(MaskError):
    """Raised when an operation needs at least one set pixel."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise MaskError(f"binary mask must be a non-empty 2-D raster, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_box(cls, box: "Box", height: int, width: int) -> "BinaryMask":
        """Rasterize a box as a filled mask, clipped to the raster."""
        bits = np.zeros((height, width), dtype=bool)
        bits[box.y0 : box.y1, box.x0 : box.x1] = True
        return cls(bits)


@dataclass(frozen=True, eq=False)
class SoftMask:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 2 or probs.shape[0] < 1 or probs.shape[1] < 1:
            raise MaskError(f"soft mask must be a non-empty 2-D raster, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
            raise MaskError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def __eq__(self, other):
        if not isinstance(other, SoftMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.probs, other.probs))

    @classmethod
    def from_binary(cls, m: BinaryMask) -> "SoftMask":
        return cls(m.bits.astype(np.float64))


@dataclass(frozen=True, order=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise MaskError(f"invalid box {self.as_list()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, xs: Sequence[int]) -> "Box":
        if len(xs) != 4:
            raise MaskError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*xs)

    def union(self, other: "Box") -> "Box":
        """Smallest box enclosing both."""
        return Box(min(self.x0, other.x0), min(self.y0, other.y0),
                   max(self.x1, other.x1), max(self.y1, other.y1))


@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths; the first run counts zeros."""

    height: int
    width: int
    runs: tuple[int, ...]

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "runs": list(self.runs)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            return cls(int(obj["h"]), int(obj["w"]), tuple(int(r) for r in obj["runs"]))
        except (KeyError, TypeError) as exc:
            raise MaskError(f"malformed RLE object: {obj!r}") from exc


PROVENANCE = ("oracle", "distractor")


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Ordered proposal masks of shape ``(Q, H, W)`` with a provenance tag each."""

    masks: np.ndarray
    provenance: tuple[str, ...] = field(default=())

    def __post_init__(self):
        masks = np.array(self.masks, dtype=np.float64, copy=True)
        if masks.ndim != 3:
            raise MaskError(f"proposal stack must be (Q, H, W), got shape {masks.shape}")
        if masks.size and (masks.min() < 0.0 or masks.max() > 1.0):
            raise MaskError("proposal values must lie in [0, 1]")
        prov = tuple(self.provenance) if self.provenance else ("oracle",) * masks.shape[0]
        if len(prov) != masks.shape[0]:
            raise MaskError("one provenance tag per proposal required")
        bad = set(prov) - set(PROVENANCE)
        if bad:
            raise MaskError(f"unknown provenance tags {sorted(bad)}")
        object.__setattr__(self, "masks", _frozen(masks))
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    def __getitem__(self, q: int) -> SoftMask:
        return SoftMask(self.masks[q])

    def binary(self, q: int, tau: float = 0.5) -> BinaryMask:
        return BinaryMask(self.masks[q] > tau)

    @classmethod
    def from_masks(cls, masks: Sequence[Union[BinaryMask, SoftMask]],
                   provenance: Sequence[str] = ()) -> "ProposalSet":
        if not masks:
            raise MaskError("cannot build a proposal set from zero masks")
        arrs = [m.bits if isinstance(m, BinaryMask) else m.probs for m in masks]
        if len({a.shape for a in arrs}) != 1:
            raise MaskError("proposals must share one raster size")
        return cls(np.stack(arrs).astype(np.float64), tuple(provenance))


def _check_same(a_shape, b_shape):
    if tuple(a_shape) != tuple(b_shape):
        raise MaskError(f"dimension mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")


def iou_mask(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks score 1."""
    _check_same(a.shape, b.shape)
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def iou_box(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.area + b.area - inter)


def mask_to_box(m: BinaryMask) -> Box:
    """Tightest half-open box around the set pixels."""
    rows = np.flatnonzero(m.bits.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    cols = np.flatnonzero(m.bits.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def resize_mask(m: Union[BinaryMask, SoftMask], gh: int, gw: int) -> SoftMask:
    """Block-average a mask down to a ``gh x gw`` grid.

    Only integer downsampling factors are supported.
    """
    arr = m.bits.astype(np.float64) if isinstance(m, BinaryMask) else m.probs
    h, w = arr.shape
    if gh < 1 or gw < 1 or gh > h or gw > w or h % gh or w % gw:
        raise MaskError(f"cannot block-resize {h}x{w} to {gh}x{gw}")
    blocks = arr.reshape(gh, h // gh, gw, w // gw)
    return SoftMask(blocks.mean(axis=(1, 3)))


def _check_scores(scores, n: int) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (n,):
        raise MaskError(f"expected {n} scores, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
        raise MaskError("scores must lie in [0, 1]")
    return s


def merge_stack(scores: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Pixel-wise max of score-weighted masks on raw arrays (no validation)."""
    return (scores[:, None, None] * masks).max(axis=0)


def merge_proposals(scores, proposals: ProposalSet) -> SoftMask:
    """Merge scored proposals into one mask by pixel-wise maximum."""
    s = _check_scores(scores, len(proposals))
    if len(proposals) == 0:
        raise MaskError("cannot merge an empty proposal set")
    return SoftMask(merge_stack(s, proposals.masks))


def binarize(m: SoftMask, tau: float = 0.5) -> BinaryMask:
    if not 0.0 <= tau <= 1.0:
        raise MaskError(f"threshold {tau} outside [0, 1]")
    return BinaryMask(m.probs > tau)


def best_match(pointer: Union[Box, BinaryMask], proposals: ProposalSet) -> int:
    """Index of the proposal with the highest IoU against ``pointer``.

    Box pointers are rasterized first. Ties go to the lowest index.
    """
    if len(proposals) == 0:
        raise MaskError("cannot match against an empty proposal set")
    h, w = proposals.shape
    if isinstance(pointer, Box):
        pointer = BinaryMask.from_box(pointer, h, w)
    _check_same(pointer.shape, (h, w))
    bins = proposals.masks > 0.5
    p = pointer.bits[None]
    inter = np.logical_and(bins, p).sum(axis=(1, 2))
    union = np.logical_or(bins, p).sum(axis=(1, 2))
    ious = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return int(np.argmax(ious))


def rle_encode(m: BinaryMask) -> RleMask:
    flat = m.bits.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(m.height, m.width, tuple(int(r) for r in runs))


def rle_decode(r: RleMask) -> BinaryMask:
    if r.height < 1 or r.width < 1:
        raise MaskError(f"invalid RLE dimensions {r.height}x{r.width}")
    runs = np.asarray(r.runs, dtype=np.int64)
    if runs.size == 0 or runs.min() < 0 or int(runs.sum()) != r.height * r.width:
        raise MaskError(f"RLE runs sum to {int(runs.sum()) if runs.size else 0}, "
                        f"expected {r.height * r.width}")
    values = np.arange(runs.size) % 2 == 1
    flat = np.repeat(values, runs)
    return BinaryMask(flat.reshape(r.height, r.width))
