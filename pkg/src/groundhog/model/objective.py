"""Total training loss of a batch and its exact gradient w.r.t. every parameter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..grounding import grounding_query, score_logits
from ..losses import LossBundle, bce_loss, dice_loss, projection_loss
from ..nn import log_softmax, mlp2_bwd, sigmoid
from .layout import Example
from .params import TrainConfig, sub
from .transformer import Batch, as_f64, backward, forward, make_batch


@dataclass(eq=False)
class PhraseResult:
    b: int
    phrase: int
    scores: np.ndarray
    merged: np.ndarray


def lm_positions(batch: Batch):
    """``(batch index, predicting position, target id)`` for every assistant token."""
    bs, pos, tgt = [], [], []
    for b, ex in enumerate(batch.examples):
        off = ex.n_entities
        for t in np.flatnonzero(ex.targets):
            if t == 0:
                continue
            bs.append(b)
            pos.append(off + t - 1)
            tgt.append(ex.ids[t])
    return np.asarray(bs, np.int64), np.asarray(pos, np.int64), np.asarray(tgt, np.int64)


def merge_with_argmax(scores: np.ndarray, masks: np.ndarray):
    """Pixel-wise max of ``scores[q] * masks[q]`` plus the (lowest) winning index."""
    weighted = scores[:, None, None] * masks
    arg = weighted.argmax(axis=0)
    merged = np.take_along_axis(weighted, arg[None], axis=0)[0]
    return merged, arg


def query_slots(mode: str, start: int, end: int) -> tuple[int, ...]:
    return {"sum": (start, end), "start_only": (start,), "end_only": (end,)}[mode]


def loss_and_grads(params: dict, examples: Sequence[Example], cfg: TrainConfig,
                   pad_id: int = 0, need_grads: bool = True):
    """Return ``(LossBundle, grads or None, phrase results)`` for one batch."""
    p = as_f64(params)
    w = cfg.loss_weights
    batch = make_batch(examples, pad_id, cfg.max_seq)
    hf, cache = forward(p, batch, cfg)
    dhf = np.zeros_like(hf)
    d = cfg.d

    # language modelling on assistant tokens
    lb, lp, lt = lm_positions(batch)
    lm = 0.0
    g_lm_w = np.zeros_like(p["lm_head.w"])
    g_lm_b = np.zeros_like(p["lm_head.b"])
    if len(lb):
        h = hf[lb, lp]
        lg = h @ p["lm_head.w"] + p["lm_head.b"]
        logp = log_softmax(lg)
        lm = float(-logp[np.arange(len(lt)), lt].mean())
        if need_grads:
            dlg = np.exp(logp)
            dlg[np.arange(len(lt)), lt] -= 1.0
            dlg *= w["lm"] / len(lt)
            g_lm_w = h.T @ dlg
            g_lm_b = dlg.sum(axis=0)
            dhf[lb, lp] += dlg @ p["lm_head.w"].T

    # grounding: score every proposal, merge, compare with the phrase target
    head = sub(p, "head.")
    phrases = []
    sums = {"dice": 0.0, "bce": 0.0, "proj": 0.0}
    counts = {"dice": 0, "bce": 0, "proj": 0}
    for b, ex in enumerate(examples):
        n_ent = ex.n_entities
        for k, ph in enumerate(ex.phrases):
            gs, ge = n_ent + ph.start, n_ent + ph.end
            q = grounding_query(hf[b, gs], hf[b, ge], cfg.query_mode)
            logit, hc = score_logits(q, hf[b, :n_ent], head)
            s = sigmoid(logit)
            merged, arg = merge_with_argmax(s, ex.masks)
            parts = {}
            if ph.kind == "mask":
                parts["dice"] = dice_loss(merged, ph.mask)
                parts["bce"] = bce_loss(merged, ph.mask)
            elif ph.kind == "box":
                parts["proj"] = projection_loss(merged, ph.box)
            for key, (val, _) in parts.items():
                sums[key] += val
                counts[key] += 1
            phrases.append((b, k, gs, ge, s, merged, arg, hc, parts))

    results = []
    g_head = {k: np.zeros_like(v) for k, v in head.items()}
    for b, k, gs, ge, s, merged, arg, hc, parts in phrases:
        results.append(PhraseResult(b, k, s, merged))
        if not need_grads or not parts:
            continue
        dmerged = np.zeros_like(merged)
        for key, (_, grad) in parts.items():
            dmerged += (w[key] / counts[key]) * grad
        masks = examples[b].masks
        won = np.take_along_axis(masks, arg[None], axis=0)[0]
        ds = np.bincount(arg.ravel(), weights=(dmerged * won).ravel(), minlength=len(s))
        dlogit = ds * s * (1.0 - s)
        dx, gh = mlp2_bwd(dlogit[:, None], hc)
        for key, v in gh.items():
            g_head[key] += v
        dq = dx[:, :d].sum(axis=0)
        dhf[b, : examples[b].n_entities] += dx[:, d:]
        for slot in query_slots(cfg.query_mode, gs, ge):
            dhf[b, slot] += dq

    bundle = LossBundle(lm=lm, weights=dict(w), **{
        key: (sums[key] / counts[key] if counts[key] else 0.0) for key in sums})
    if not need_grads:
        return bundle, None, results
    grads = backward(p, batch, cfg, cache, dhf)
    grads["lm_head.w"] += g_lm_w
    grads["lm_head.b"] += g_lm_b
    for key, v in g_head.items():
        grads["head." + key] += v
    return bundle, grads, results
