"""Grounding query, per-entity scoring and the merged grounding mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .masks import ProposalSet, SoftMask, binarize, merge_proposals, rle_encode
from .nn import mlp2_fwd, sigmoid

QUERY_MODES = ("start_only", "end_only", "sum")
SELECT_THRESHOLD = 0.5


class GroundingError(ValueError):
    pass


def grounding_query(h_start, h_end, mode: str = "sum") -> np.ndarray:
    """Combine the hidden states of ``<GRD>`` and ``</GRD>`` into one query."""
    a = np.asarray(h_start, dtype=np.float64)
    b = np.asarray(h_end, dtype=np.float64)
    if a.shape != b.shape:
        raise GroundingError(f"hidden dims differ: {a.shape} vs {b.shape}")
    if mode == "sum":
        return a + b
    if mode == "start_only":
        return a.copy()
    if mode == "end_only":
        return b.copy()
    raise GroundingError(f"unknown grounding-query mode {mode!r}")


def score_logits(q: np.ndarray, entity_hiddens: np.ndarray, head: Mapping[str, np.ndarray]):
    """Pre-sigmoid scores and the MLP cache for ``concat(q, h_e)`` per entity."""
    hs = np.asarray(entity_hiddens, dtype=np.float64)
    if hs.ndim != 2 or hs.shape[0] == 0:
        raise GroundingError("need a non-empty (E, d) stack of entity hidden states")
    if hs.shape[1] != q.shape[-1]:
        raise GroundingError(f"entity dim {hs.shape[1]} does not match query dim {q.shape[-1]}")
    x = np.concatenate([np.broadcast_to(q, hs.shape), hs], axis=1)
    out, cache = mlp2_fwd(x, np.asarray(head["w1"], np.float64), np.asarray(head["b1"], np.float64),
                          np.asarray(head["w2"], np.float64), np.asarray(head["b2"], np.float64))
    return out[:, 0], cache


def score_entities(q, entity_hiddens, head: Mapping[str, np.ndarray]) -> np.ndarray:
    """Independent sigmoid score in (0, 1) for every entity."""
    logits, _ = score_logits(np.asarray(q, dtype=np.float64), entity_hiddens, head)
    return sigmoid(logits)


@dataclass(frozen=True, eq=False)
class GroundedPhrase:
    scores: np.ndarray
    mask: SoftMask
    selected: tuple[int, ...]


def ground_phrase(q, entity_hiddens, head, proposals: ProposalSet) -> GroundedPhrase:
    """Score every proposal and merge all of them, unthresholded."""
    if len(proposals) != np.asarray(entity_hiddens).shape[0]:
        raise GroundingError("one entity hidden state per proposal required")
    scores = score_entities(q, entity_hiddens, head)
    merged = merge_proposals(scores, proposals)
    selected = tuple(int(i) for i in np.flatnonzero(scores > SELECT_THRESHOLD))
    return GroundedPhrase(scores, merged, selected)


def diagnosis_record(phrase_text: str, grounded: GroundedPhrase, proposals: ProposalSet,
                     topk: int) -> dict:
    """Top-k proposals by score with provenance, selection flag and RLE mask."""
    order = sorted(range(len(grounded.scores)), key=lambda i: (-grounded.scores[i], i))
    k = min(topk, len(order))
    entries = []
    for i in order[:k]:
        entries.append({
            "index": i,
            "score": float(grounded.scores[i]),
            "provenance": proposals.provenance[i],
            "selected": bool(grounded.scores[i] > SELECT_THRESHOLD),
            "mask": rle_encode(proposals.binary(i)).to_json(),
        })
    return {
        "text": phrase_text,
        "topk": entries,
        "merged_mask": rle_encode(binarize(grounded.mask)).to_json(),
    }

