"""Decode a corpus, write prediction records, and score them.

Scoring only ever reads prediction records, so evaluating a saved
prediction file gives exactly the numbers of a live run.

Records follow the prediction schema (``phrase_id``, ``text``, ``mask``,
``selected_boxes``, ``score_vector``) and add ``sample_id`` and
``response``. A sample whose response holds no grounded phrase gets one
placeholder record with ``phrase_id`` ``"<sample_id>:-"`` and an empty mask,
so that every sample appears in the file.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from .data.conversations import GroundedConversation
from .masks import BinaryMask, Box, binarize, mask_to_box, rle_decode, rle_encode, RleMask
from .metrics import (MetricError, MetricReport, PhraseBoxes, any_iou, binary_qa_metrics,
                      box_recall_at1_merged, ciou, grounding_f1, per_sample_iou)
from .model.decode import DEFAULT_MAX_NEW, DecodeResult, decode_many
from .model.layout import prepare
from .model.params import TrainConfig
from .model.vocab import Vocabulary

METRICS = ("ciou", "miou", "f1", "anyiou", "pope", "recall@1")
PLACEHOLDER = "-"
_TAGS = re.compile(r"</?GRD>")


def _phrase_id(sample_id: str, k) -> str:
    return f"{sample_id}:{k}"


def _sample_of(phrase_id: str) -> str:
    return phrase_id.rsplit(":", 1)[0]


def prediction_records(conv: GroundedConversation, result: DecodeResult) -> list[dict]:
    proposals = conv.proposals
    h, w = proposals.shape
    out = []
    for k, ph in enumerate(result.phrases):
        g = ph.grounded
        boxes = []
        for q in g.selected:
            b = proposals.binary(q)
            if b.area():
                boxes.append(mask_to_box(b).as_list())
        out.append({
            "phrase_id": _phrase_id(conv.sample_id, k),
            "text": ph.text,
            "mask": rle_encode(binarize(g.mask)).to_json(),
            "selected_boxes": boxes,
            "score_vector": [float(s) for s in g.scores],
            "sample_id": conv.sample_id,
            "response": result.text,
        })
    if not out:
        out.append({
            "phrase_id": _phrase_id(conv.sample_id, PLACEHOLDER),
            "text": "",
            "mask": rle_encode(BinaryMask.zeros(h, w)).to_json(),
            "selected_boxes": [],
            "score_vector": [],
            "sample_id": conv.sample_id,
            "response": result.text,
        })
    return out


def predict(params: dict, cfg: TrainConfig, vocab: Vocabulary,
            convs: Sequence[GroundedConversation], max_new: int = DEFAULT_MAX_NEW,
            chunk: int = 64) -> list[dict]:
    """Greedy-decode the first user turn of every conversation."""
    records = []
    for i in range(0, len(convs), chunk):
        part = convs[i : i + chunk]
        prompts = [prepare(c, vocab, cfg.max_seq, prompt_only=True) for c in part]
        results = decode_many(params, cfg, vocab, prompts, [c.proposals for c in part], max_new)
        for c, r in zip(part, results):
            records.extend(prediction_records(c, r))
    return records


def _gt_phrases(conv: GroundedConversation):
    """``(text, masks, boxes)`` per grounded span of the first assistant turn."""
    turn = next(t for t in conv.turns if t.role == "assistant")
    out = []
    for span in turn.spans:
        text = " ".join(_TAGS.sub(" ", turn.text[span.start : span.end]).split())
        sup = span.supervision
        masks = [m for m in sup.masks if m.area()] if sup.kind == "mask" else []
        boxes = [mask_to_box(m) for m in masks] if sup.kind == "mask" else (
            [sup.box] if sup.kind == "box" else [])
        out.append((text, masks, boxes, sup.kind))
    return out


def _union(masks: Iterable[BinaryMask], h: int, w: int) -> BinaryMask:
    bits = np.zeros((h, w), dtype=bool)
    for m in masks:
        bits |= m.bits
    return BinaryMask(bits)


def group_records(records: Iterable[dict]) -> dict:
    by_sample = defaultdict(list)
    for r in records:
        for key in ("phrase_id", "text", "mask", "selected_boxes", "score_vector"):
            if key not in r:
                raise MetricError(f"prediction record lacks {key!r}")
        sid = r.get("sample_id", _sample_of(r["phrase_id"]))
        by_sample[sid].append(r)
    return by_sample


def _pred_phrases(recs: list[dict]) -> list[dict]:
    return [r for r in recs if not r["phrase_id"].endswith(":" + PLACEHOLDER)]


def score(records: Iterable[dict], convs: Sequence[GroundedConversation],
          metrics: Sequence[str] = METRICS) -> dict:
    """Route prediction records to the requested metrics; returns a JSON-ready dict."""
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise MetricError(f"unknown metric(s) {unknown}; choose from {list(METRICS)}")
    by_sample = group_records(records)
    pairs, kinds = [], []
    f1_pred, f1_gt = [], []
    r1_pred, r1_gt = [], []
    any_terms = []
    qa_pred, qa_gt = [], []
    for conv in convs:
        sid = conv.sample_id
        recs = by_sample.get(sid)
        if recs is None:
            raise MetricError(f"no prediction for sample {sid!r}")
        h, w = conv.proposals.shape
        phrases = _pred_phrases(recs)
        pred_masks = [rle_decode(RleMask.from_json(r["mask"])) for r in phrases]
        gts = _gt_phrases(conv)
        response = recs[0].get("response", "")
        if conv.meta.get("qa") == "presence":
            qa_pred.append(response.strip().lower().startswith("yes"))
            qa_gt.append(conv.meta["answer"] == "yes")
        if gts and all(kind == "mask" for _, _, _, kind in gts):
            gt_union = _union((m for _, ms, _, _ in gts for m in ms), h, w)
            pairs.append((_union(pred_masks, h, w), gt_union))
            kinds.append(conv.meta.get("res_kind", conv.task))
            gt_masks = [m for _, ms, _, _ in gts for m in ms]
            if gt_masks:
                any_terms.append(any_iou(gt_masks, conv.proposals))
        targeted = [(t, b) for t, _, b, _ in gts if b]
        if targeted:
            for t, b in targeted:
                f1_gt.append(PhraseBoxes(t, tuple(b), sid))
            for r in phrases:
                f1_pred.append(PhraseBoxes(r["text"], tuple(Box.from_list(b) for b in
                                                             r["selected_boxes"]), sid))
            # top-1 recall pairs phrases in order; a missing prediction is an empty mask
            for k, (_, b) in enumerate(targeted):
                r1_pred.append(pred_masks[k] if k < len(pred_masks) else BinaryMask.zeros(h, w))
                r1_gt.append(b)
    report = {}
    if "ciou" in metrics and pairs:
        report["ciou"] = MetricReport("ciou", ciou(pairs), len(pairs)).to_json()
    if "miou" in metrics and pairs:
        ious = per_sample_iou(pairs)
        by_kind = defaultdict(list)
        for kind, v in zip(kinds, ious):
            by_kind[kind].append(v)
        rep = MetricReport("miou", math.fsum(ious) / len(ious), len(ious)).to_json()
        rep["by_kind"] = {k: {"value": math.fsum(v) / len(v), "count": len(v)}
                          for k, v in sorted(by_kind.items())}
        report["miou"] = rep
    if "f1" in metrics and f1_gt:
        p, r, f = grounding_f1(f1_pred, f1_gt)
        rep = MetricReport("f1", f, len(f1_gt)).to_json()
        rep.update({"precision": p, "recall": r, "predicted": len(f1_pred)})
        report["f1"] = rep
    if "anyiou" in metrics and any_terms:
        report["anyiou"] = MetricReport("anyiou", math.fsum(any_terms) / len(any_terms),
                                        len(any_terms)).to_json()
    if "recall@1" in metrics and r1_gt:
        report["recall@1"] = MetricReport("recall@1", box_recall_at1_merged(r1_pred, r1_gt),
                                          len(r1_gt)).to_json()
    if "pope" in metrics and qa_gt:
        qa = binary_qa_metrics(qa_pred, qa_gt)
        report["pope"] = MetricReport("pope", qa.as_percent(), len(qa_gt)).to_json()
    for m in metrics:
        report.setdefault(m, MetricReport(m, None, 0).to_json())
    return report
