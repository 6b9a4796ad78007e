"""Pre-norm causal transformer over an entity-token prefix plus text.

Parameters are stored float32; every pass casts them to float64 first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..nn import layernorm_bwd, layernorm_fwd, mlp2_bwd, mlp2_fwd
from .layout import Example
from .params import TrainConfig, sub


class SequenceTooLong(ValueError):
    pass


def as_f64(params: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


@dataclass(eq=False)
class Batch:
    """Right-padded batch; row ``b`` is ``[entities | text | pad]``."""

    examples: Sequence[Example]
    tok: np.ndarray  # (B, N) token ids, pad at entity and padding slots
    valid: np.ndarray  # (B, N)
    ent_b: np.ndarray  # per entity row: batch index
    ent_pos: np.ndarray  # per entity row: absolute position
    ent_offset: np.ndarray  # (B,) first entity row of each example
    ptr_b: np.ndarray
    ptr_pos: np.ndarray
    ptr_row: np.ndarray  # entity row bound to each <PTR> slot
    text_mask: np.ndarray  # (B, N) positions embedded from tok_emb
    feats: dict  # backbone -> (R, C) stacked pooled features

    @property
    def shape(self) -> tuple[int, int]:
        return self.tok.shape

    def text_offset(self, b: int) -> int:
        return self.examples[b].n_entities


def make_batch(examples: Sequence[Example], pad_id: int, max_seq: int) -> Batch:
    n = max(ex.length for ex in examples)
    if n > max_seq:
        raise SequenceTooLong(f"sequence of {n} positions exceeds max_seq={max_seq}")
    bsz = len(examples)
    tok = np.full((bsz, n), pad_id, dtype=np.int64)
    valid = np.zeros((bsz, n), dtype=bool)
    text_mask = np.zeros((bsz, n), dtype=bool)
    ent_b, ent_pos, offsets = [], [], []
    ptr_b, ptr_pos, ptr_row = [], [], []
    row = 0
    for b, ex in enumerate(examples):
        p = ex.n_entities
        offsets.append(row)
        tok[b, p : p + len(ex.ids)] = ex.ids
        valid[b, : ex.length] = True
        text_mask[b, p : p + len(ex.ids)] = True
        ent_b += [b] * p
        ent_pos += list(range(p))
        for pos, q in ex.ptr:
            ptr_b.append(b)
            ptr_pos.append(p + pos)
            ptr_row.append(row + q)
            text_mask[b, p + pos] = False
        row += p
    feats = {k: np.concatenate([ex.feats[k] for ex in examples]) for k in examples[0].feats}
    i64 = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return Batch(examples, tok, valid, i64(ent_b), i64(ent_pos), i64(offsets),
                 i64(ptr_b), i64(ptr_pos), i64(ptr_row), text_mask, feats)


def entity_vectors(p: dict, feats: dict, backbones: Sequence[str]):
    """Sum of per-backbone projections of pooled features; ``(R, d)``."""
    total, caches = None, {}
    for name in backbones:
        q = sub(p, f"proj.{name}.")
        y, caches[name] = mlp2_fwd(feats[name], q["w1"], q["b1"], q["w2"], q["b2"])
        total = y if total is None else total + y
    return total, caches


def _attn_fwd(x, q, heads, allowed):
    bsz, n, d = x.shape
    dh = d // heads
    qkv = x @ q["attn.wqkv"] + q["attn.bqkv"]
    qkv = qkv.reshape(bsz, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    qh, kh, vh = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / np.sqrt(dh)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s = np.where(allowed, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = a @ vh
    o2 = o.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    y = o2 @ q["attn.wo"] + q["attn.bo"]
    return y, (x, qh, kh, vh, a, o2, scale)


def _attn_bwd(dy, cache, q, heads):
    x, qh, kh, vh, a, o2, scale = cache
    bsz, n, d = x.shape
    dh = d // heads
    g = {}
    g["attn.wo"] = o2.reshape(-1, d).T @ dy.reshape(-1, d)
    g["attn.bo"] = dy.sum(axis=(0, 1))
    do = (dy @ q["attn.wo"].T).reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3)
    da = do @ vh.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    dq = (ds @ kh) * scale
    dk = (ds.transpose(0, 1, 3, 2) @ qh) * scale
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, n, 3 * d)
    g["attn.wqkv"] = x.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
    g["attn.bqkv"] = dqkv.sum(axis=(0, 1))
    dx = dqkv @ q["attn.wqkv"].T
    return dx, g


def forward(p: dict, batch: Batch, cfg: TrainConfig):
    """Final-norm hidden states ``(B, N, d)`` and the cache for :func:`backward`."""
    bsz, n = batch.shape
    ent, ent_cache = entity_vectors(p, batch.feats, cfg.backbones)
    x = p["tok_emb"][batch.tok]
    if len(batch.ent_b):
        x[batch.ent_b, batch.ent_pos] = ent
    if len(batch.ptr_b):
        x[batch.ptr_b, batch.ptr_pos] = ent[batch.ptr_row]
    x = x + p["pos_emb"][:n]
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = (causal[None] & batch.valid[:, None, :])[:, None]
    blocks = []
    for layer in range(cfg.layers):
        q = sub(p, f"blocks.{layer}.")
        xn, ln1 = layernorm_fwd(x, q["ln1.g"], q["ln1.b"])
        y, attn = _attn_fwd(xn, q, cfg.heads, allowed)
        x = x + y
        # the feed-forward path is position-wise, so padding rows are skipped
        xv = x[batch.valid]
        xn2, ln2 = layernorm_fwd(xv, q["ln2.g"], q["ln2.b"])
        y, mlp = mlp2_fwd(xn2, q["mlp.w1"], q["mlp.b1"], q["mlp.w2"], q["mlp.b2"])
        x = x.copy()
        x[batch.valid] += y
        blocks.append((ln1, attn, ln2, mlp))
    hf, lnf = layernorm_fwd(x, p["lnf.g"], p["lnf.b"])
    return hf, {"ent": ent, "ent_cache": ent_cache, "blocks": blocks, "lnf": lnf}


def logits(p: dict, hf: np.ndarray) -> np.ndarray:
    return hf @ p["lm_head.w"] + p["lm_head.b"]


def backward(p: dict, batch: Batch, cfg: TrainConfig, cache: dict, dhf: np.ndarray) -> dict:
    """Gradients of every parameter given ``dL/dhf``; LM-head grads are added by the caller."""
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dx, dg, db = layernorm_bwd(dhf, cache["lnf"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db
    for layer in reversed(range(cfg.layers)):
        pre = f"blocks.{layer}."
        q = sub(p, pre)
        ln1, attn, ln2, mlp = cache["blocks"][layer]
        dxn2, gm = mlp2_bwd(dx[batch.valid], mlp)
        for k, v in gm.items():
            grads[pre + "mlp." + k] += v
        d2, dg, db = layernorm_bwd(dxn2, ln2)
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx.copy()
        dx[batch.valid] += d2
        dxn, ga = _attn_bwd(dx, attn, q, cfg.heads)
        for k, v in ga.items():
            grads[pre + k] += v
        d1, dg, db = layernorm_bwd(dxn, ln1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + d1
    n = batch.shape[1]
    grads["pos_emb"][:n] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], batch.tok[batch.text_mask], dx[batch.text_mask])
    dent = np.zeros_like(cache["ent"])
    if len(batch.ent_b):
        dent += dx[batch.ent_b, batch.ent_pos]
    if len(batch.ptr_b):
        np.add.at(dent, batch.ptr_row, dx[batch.ptr_b, batch.ptr_pos])
    for name, c in cache["ent_cache"].items():
        _, gp = mlp2_bwd(dent, c)
        for k, v in gp.items():
            grads[f"proj.{name}.{k}"] += v
    return grads
