"""Greedy grounded decoding.

Generation appends one argmax token at a time (the padding, ``<s>`` and
``<PTR>`` tokens are never emitted). ``<GRD>`` positions go on a stack; each
``</GRD>`` closes the most recent open one and becomes a grounded phrase.
Malformed output is reported through warning records, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..grounding import GroundedPhrase, ground_phrase, grounding_query
from ..masks import ProposalSet
from .layout import Example
from .params import TrainConfig, sub
from .transformer import as_f64, forward, logits, make_batch
from .vocab import Vocabulary

DEFAULT_MAX_NEW = 40


@dataclass(frozen=True, eq=False)
class DecodedPhrase:
    text: str
    start: int  # generated-token index of <GRD>
    end: int  # generated-token index of </GRD>
    grounded: GroundedPhrase


@dataclass(eq=False)
class DecodeResult:
    ids: list  # generated ids, including a final </s> if one was emitted
    text: str
    phrases: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    stopped: bool = False  # True when </s> ended generation


def _banned(vocab: Vocabulary) -> list[int]:
    return [vocab.pad, vocab.bos, vocab.ptr]


def hidden_states(params: dict, cfg: TrainConfig, ex: Example, pad_id: int = 0) -> np.ndarray:
    """Final-norm hidden states ``(N, d)`` of a single example."""
    hf, _ = forward(as_f64(params), make_batch([ex], pad_id, cfg.max_seq), cfg)
    return hf[0]


def _pair(gen: Sequence[int], vocab: Vocabulary):
    stack, pairs, warnings = [], [], []
    for i, t in enumerate(gen):
        if t == vocab.grd:
            stack.append(i)
        elif t == vocab.grd_end:
            if stack:
                pairs.append((stack.pop(), i))
            else:
                warnings.append({"warning": "unmatched </GRD>", "position": i})
    for i in stack:
        warnings.append({"warning": "unclosed <GRD> discarded", "position": i})
    return sorted(pairs), warnings


def _finish(p64: dict, cfg: TrainConfig, vocab: Vocabulary, ex: Example, gen: list,
            proposals: ProposalSet, stopped: bool) -> DecodeResult:
    pairs, warnings = _pair(gen, vocab)
    body = gen[:-1] if stopped else gen
    result = DecodeResult(ids=list(gen), text=vocab.detokenize(body), warnings=warnings,
                          stopped=stopped)
    if not stopped:
        warnings.append({"warning": "generation budget exhausted before </s>"})
    if not pairs:
        return result
    if len(proposals) == 0:
        warnings.append({"warning": "no proposals; grounded phrases dropped"})
        return result
    full = replace(ex, ids=np.concatenate([ex.ids, np.asarray(gen, dtype=np.int64)]))
    hf, _ = forward(p64, make_batch([full], vocab.pad, cfg.max_seq), cfg)
    hf = hf[0]
    base = ex.length
    head = sub(p64, "head.")
    ents = hf[: ex.n_entities]
    for s, e in pairs:
        q = grounding_query(hf[base + s], hf[base + e], cfg.query_mode)
        text = vocab.detokenize(gen[s + 1 : e])
        result.phrases.append(DecodedPhrase(text, s, e, ground_phrase(q, ents, head, proposals)))
    return result


def decode_many(params: dict, cfg: TrainConfig, vocab: Vocabulary, prompts: Sequence[Example],
                proposals: Sequence[ProposalSet], max_new: int = DEFAULT_MAX_NEW,
                forced: Optional[Sequence[Sequence[int]]] = None) -> list[DecodeResult]:
    """Greedy-decode several prompts side by side.

    Rows never interact (padding keys are masked), so every result equals
    decoding that prompt alone. ``forced[k]`` optionally fixes the first
    generated tokens of prompt ``k``.
    """
    p64 = as_f64(params)
    n = len(prompts)
    budget = [max(0, min(max_new, cfg.max_seq - ex.length)) for ex in prompts]
    gens: list[list[int]] = [[] for _ in range(n)]
    done = [b == 0 for b in budget]
    stopped = [False] * n
    banned = _banned(vocab)
    while not all(done):
        active = [k for k in range(n) if not done[k]]
        batch_ex = [replace(prompts[k], ids=np.concatenate(
            [prompts[k].ids, np.asarray(gens[k], dtype=np.int64)])) for k in active]
        hf, _ = forward(p64, make_batch(batch_ex, vocab.pad, cfg.max_seq), cfg)
        last = np.asarray([ex.length - 1 for ex in batch_ex])
        lg = logits(p64, hf[np.arange(len(active)), last])
        lg[:, banned] = -np.inf
        for row, k in enumerate(active):
            step = len(gens[k])
            if forced is not None and step < len(forced[k]):
                tok = int(forced[k][step])
            else:
                tok = int(np.argmax(lg[row]))
            gens[k].append(tok)
            if tok == vocab.eos:
                stopped[k] = done[k] = True
            elif len(gens[k]) >= budget[k]:
                done[k] = True
    return [_finish(p64, cfg, vocab, prompts[k], gens[k], proposals[k], stopped[k])
            for k in range(n)]


def decode(params: dict, cfg: TrainConfig, vocab: Vocabulary, prompt: Example,
           proposals: ProposalSet, max_new: int = DEFAULT_MAX_NEW,
           forced: Optional[Sequence[int]] = None) -> DecodeResult:
    """Greedy-decode one prompt and ground every closed ``<GRD>`` span."""
    return decode_many(params, cfg, vocab, [prompt], [proposals], max_new,
                       None if forced is None else [forced])[0]
