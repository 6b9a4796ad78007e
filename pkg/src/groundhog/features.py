"""Masked feature pooling and projection into visual entity tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .masks import ProposalSet, SoftMask, resize_mask
from .nn import mlp2_fwd


class FeatureError(ValueError):
    pass


class DegenerateMaskError(FeatureError):
    """The pooling mask has no positive weight."""


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Channel-major grid features of shape ``(channels, gh, gw)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise FeatureError(f"feature map must be (C, gh, gw), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FeatureError("feature map has non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class EntityToken:
    vector: np.ndarray
    proposal_index: int


def mask_pool(fmap: FeatureMap, m: SoftMask) -> np.ndarray:
    """Mask-weighted per-channel average of ``fmap``."""
    if m.shape != fmap.grid:
        raise FeatureError(f"mask {m.shape} does not match feature grid {fmap.grid}")
    total = m.probs.sum()
    if total <= 0.0:
        raise DegenerateMaskError("cannot pool with an all-zero mask")
    return np.einsum("chw,hw->c", fmap.data, m.probs) / total


def pool_proposals(fmap: FeatureMap, proposals: ProposalSet) -> np.ndarray:
    """Pool ``fmap`` under every proposal; returns ``(Q, channels)``."""
    gh, gw = fmap.grid
    out = np.empty((len(proposals), fmap.channels))
    for q in range(len(proposals)):
        out[q] = mask_pool(fmap, resize_mask(proposals[q], gh, gw))
    return out


def project(v: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Two-layer GELU perceptron ``w2 . gelu(w1 . v + b1) + b2``.

    Weights are stored input-major: ``w1`` is ``(in, hidden)``.
    """
    v = np.asarray(v, dtype=np.float64)
    w1 = np.asarray(params["w1"], dtype=np.float64)
    if v.shape[-1] != w1.shape[0]:
        raise FeatureError(f"input dim {v.shape[-1]} does not match projection {w1.shape[0]}")
    out, _ = mlp2_fwd(v, w1, np.asarray(params["b1"], np.float64),
                      np.asarray(params["w2"], np.float64), np.asarray(params["b2"], np.float64))
    return out


def entity_tokens(fmaps: Sequence[FeatureMap], proposals: ProposalSet,
                  projections: Sequence[Mapping[str, np.ndarray]]) -> list[EntityToken]:
    """Project pooled features per backbone and sum across backbones."""
    if len(fmaps) != len(projections):
        raise FeatureError("need exactly one projection per backbone")
    if not fmaps:
        raise FeatureError("need at least one backbone")
    total = None
    for fmap, params in zip(fmaps, projections):
        y = project(pool_proposals(fmap, proposals), params)
        total = y if total is None else total + y
    return [EntityToken(total[q], q) for q in range(len(proposals))]
