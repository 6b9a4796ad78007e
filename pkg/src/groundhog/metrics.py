"""Evaluation metrics for segmentation, box grounding and yes/no answers.

All functions are pure. Per-sample terms are reduced in input order with a
single final division, so results are bit-stable for a given input.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .masks import BinaryMask, Box, EmptyMaskError, ProposalSet, iou_box, iou_mask, mask_to_box

HIT_IOU = 0.5


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    """One metric's value(s) with the number of samples behind it."""

    name: str
    value: object
    count: int
    per_sample: Optional[list] = None

    def to_json(self) -> dict:
        out = {"name": self.name, "value": self.value, "count": self.count}
        if self.per_sample is not None:
            out["per_sample"] = self.per_sample
        return out


def _pairs(pairs) -> list[tuple[BinaryMask, BinaryMask]]:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("metric needs at least one (prediction, ground truth) pair")
    return pairs


def _iou_terms(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int]:
    if pred.shape != gt.shape:
        raise MetricError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred.bits, gt.bits).sum())
    union = int(np.logical_or(pred.bits, gt.bits).sum())
    return inter, union


def ciou(pairs: Iterable[tuple[BinaryMask, BinaryMask]]) -> float:
    """Cumulative IoU: total intersection over total union.

    A dataset whose every pair is empty-vs-empty scores 1, matching the
    per-pair convention of :func:`iou_mask`.
    """
    inter = union = 0
    for pred, gt in _pairs(pairs):
        i, u = _iou_terms(pred, gt)
        inter += i
        union += u
    return 1.0 if union == 0 else inter / union


def per_sample_iou(pairs) -> list[float]:
    out = []
    for pred, gt in _pairs(pairs):
        i, u = _iou_terms(pred, gt)
        out.append(1.0 if u == 0 else i / u)
    return out


def miou(pairs: Iterable[tuple[BinaryMask, BinaryMask]]) -> float:
    """Mean of per-pair IoU; a correct no-target pair (both empty) counts 1."""
    ious = per_sample_iou(pairs)
    return math.fsum(ious) / len(ious)


def recall_at_iou(pairs, tau: float) -> float:
    """Fraction of pairs whose IoU is at least ``tau``."""
    if not 0.0 < tau < 1.0:
        raise MetricError(f"tau must lie in (0, 1), got {tau}")
    ious = per_sample_iou(pairs)
    return sum(v >= tau for v in ious) / len(ious)


def any_iou(gt_masks: Sequence[BinaryMask], proposals: ProposalSet) -> float:
    """Mean over ground-truth masks of the best proposal IoU (proposal coverage)."""
    if not gt_masks:
        raise MetricError("any_iou needs at least one ground-truth mask")
    if len(proposals) == 0:
        raise MetricError("any_iou needs a non-empty proposal set")
    binaries = [proposals.binary(q) for q in range(len(proposals))]
    best = [max(iou_mask(p, g) for p in binaries) for g in gt_masks]
    return math.fsum(best) / len(best)


def box_recall_at1_merged(preds: Sequence[BinaryMask], gts: Sequence[Sequence[Box]]) -> float:
    """Top-1 recall with all ground-truth boxes of a phrase merged into one.

    The predicted mask is boxed; an empty prediction is a miss.
    """
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions for {len(gts)} phrases")
    if not preds:
        raise MetricError("box recall needs at least one phrase")
    hits = 0
    for pred, boxes in zip(preds, gts):
        if not boxes:
            raise MetricError("every phrase needs at least one ground-truth box")
        merged = boxes[0]
        for b in boxes[1:]:
            merged = merged.union(b)
        try:
            box = mask_to_box(pred)
        except EmptyMaskError:
            continue
        hits += iou_box(box, merged) >= HIT_IOU
    return hits / len(preds)


_PUNCT = re.compile(r"[^\w\s]")


def normalize_phrase(text: str) -> str:
    """Lower-case, drop punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


@dataclass(frozen=True)
class PhraseBoxes:
    """A phrase with its boxes; ``sample`` keeps phrases of different images apart."""

    text: str
    boxes: tuple = ()
    sample: str = ""


def grounding_f1(preds: Sequence[PhraseBoxes], gts: Sequence[PhraseBoxes]):
    """Phrase-level precision, recall and F1 of grounded phrases.

    A predicted phrase is a true positive when an unmatched ground-truth
    phrase of the same sample has the same normalized text and any selected
    box reaches IoU >= 0.5 with any of its boxes. Each ground-truth phrase is
    matched at most once. With no predictions precision is reported as 0;
    with neither predictions nor ground truth all three values are 1.
    """
    if not preds and not gts:
        return 1.0, 1.0, 1.0
    used = [False] * len(gts)
    tp = 0
    for p in preds:
        key = (p.sample, normalize_phrase(p.text))
        for j, g in enumerate(gts):
            if used[j] or (g.sample, normalize_phrase(g.text)) != key:
                continue
            if any(iou_box(a, b) >= HIT_IOU for a in p.boxes for b in g.boxes):
                used[j] = True
                tp += 1
                break
    precision = tp / len(preds) if preds else 0.0
    recall = tp / len(gts) if gts else 0.0
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass(frozen=True)
class BinaryQA:
    accuracy: float
    precision: float
    recall: float
    f1: float
    yes_ratio: float

    def as_percent(self) -> dict:
        return {k: round(100.0 * v, 2) for k, v in self.__dict__.items()}


def _yes(x) -> bool:
    if isinstance(x, str):
        word = normalize_phrase(x).split(" ")[0] if x.strip() else ""
        if word not in ("yes", "no"):
            raise MetricError(f"expected a yes/no answer, got {x!r}")
        return word == "yes"
    return bool(x)


def binary_qa_metrics(preds: Sequence, gts: Sequence) -> BinaryQA:
    """Accuracy, precision, recall, F1 and yes-ratio with "yes" as positive."""
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions for {len(gts)} answers")
    if not preds:
        raise MetricError("binary QA metrics need at least one answer")
    p = np.asarray([_yes(x) for x in preds])
    g = np.asarray([_yes(x) for x in gts])
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    n = len(p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryQA(float((p == g).sum()) / n, precision, recall, f1, float(p.sum()) / n)


@dataclass
class PredictionRecord:
    """One line of a prediction file."""

    phrase_id: str
    text: str
    mask: dict  # RLE JSON
    selected_boxes: list = field(default_factory=list)
    score_vector: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"phrase_id": self.phrase_id, "text": self.text, "mask": self.mask,
                "selected_boxes": self.selected_boxes, "score_vector": self.score_vector}

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionRecord":
        missing = {"phrase_id", "text", "mask", "selected_boxes", "score_vector"} - set(obj)
        if missing:
            raise MetricError(f"prediction record lacks {sorted(missing)}")
        return cls(str(obj["phrase_id"]), str(obj["text"]), dict(obj["mask"]),
                   [list(map(int, b)) for b in obj["selected_boxes"]],
                   [float(s) for s in obj["score_vector"]])
