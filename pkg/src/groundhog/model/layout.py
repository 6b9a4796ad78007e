"""Sequence layout: entity prefix, conversation tokens, grounded spans, pointers.

Text is serialized as ``[system] <s> USER: u ASSISTANT: a </s> USER: ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ..data.conversations import GroundedConversation
from ..data.scenes import Scene, encode_backbones
from ..features import pool_proposals
from ..masks import BinaryMask, Box, ProposalSet, best_match
from .vocab import Vocabulary


class LayoutError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhraseTarget:
    start: int  # text position of <GRD>
    end: int  # text position of </GRD>
    kind: str  # "mask" | "box" | "none"
    mask: Optional[np.ndarray] = None
    box: Optional[Box] = None


@dataclass(eq=False)
class Example:
    """A conversation prepared for the model.

    ``feats`` holds pooled backbone features per proposal; positions in
    ``ptr`` and ``phrases`` index the text part, after the entity prefix.
    """

    feats: dict
    masks: np.ndarray
    ids: np.ndarray
    targets: np.ndarray
    ptr: list = field(default_factory=list)
    phrases: list = field(default_factory=list)
    provenance: tuple = ()
    sample_id: str = ""

    @property
    def n_entities(self) -> int:
        return self.masks.shape[0]

    @property
    def length(self) -> int:
        return self.n_entities + len(self.ids)


def permute_entities(ex: Example, perm: Sequence[int]) -> Example:
    """Same example with the entity prefix reordered: new entity ``j`` is old ``perm[j]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(ex.n_entities)):
        raise LayoutError("entity permutation must cover every proposal exactly once")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return Example(
        feats={k: v[perm] for k, v in ex.feats.items()},
        masks=ex.masks[perm],
        ids=ex.ids,
        targets=ex.targets,
        ptr=[(pos, int(inverse[q])) for pos, q in ex.ptr],
        phrases=ex.phrases,
        provenance=tuple(ex.provenance[i] for i in perm),
        sample_id=ex.sample_id,
    )


def pooled_features(scene: Scene, proposals: ProposalSet) -> dict:
    fa, fb = encode_backbones(scene)
    return {"A": pool_proposals(fa, proposals), "B": pool_proposals(fb, proposals)}


def bind_pointers(ids: Sequence[int], pointers: Sequence[Union[Box, BinaryMask]],
                  proposals: ProposalSet, vocab: Vocabulary) -> list[tuple[int, int]]:
    """Pair each ``<PTR>`` position with its best-matching proposal index."""
    slots = [i for i, t in enumerate(ids) if t == vocab.ptr]
    if len(slots) != len(pointers):
        raise LayoutError(f"{len(slots)} <PTR> slots but {len(pointers)} pointers")
    if slots and len(proposals) == 0:
        raise LayoutError("pointers need a non-empty proposal set")
    return [(pos, best_match(p, proposals)) for pos, p in zip(slots, pointers)]


def replace_ptr(embeddings: np.ndarray, ids: Sequence[int], pointers, proposals: ProposalSet,
                entity_vectors: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Copy of text ``embeddings`` with each ``<PTR>`` row set to its entity token."""
    out = np.array(embeddings, dtype=np.float64, copy=True)
    for pos, q in bind_pointers(ids, pointers, proposals, vocab):
        out[pos] = entity_vectors[q]
    return out


def _encode_turns(conv: GroundedConversation, vocab: Vocabulary, prompt_only: bool):
    ids: list[int] = []
    targets: list[bool] = []
    pointers = []
    spans = []
    grd_pos: list[int] = []

    def put(text, is_target):
        toks = vocab.tokenize(text)
        ids.extend(toks)
        targets.extend([is_target] * len(toks))
        return len(ids) - len(toks)

    turns = list(conv.turns)
    if turns and turns[0].role == "system":
        put(turns.pop(0).text, False)
    put("<s>", False)
    for k, turn in enumerate(turns):
        if turn.role == "user":
            put("USER: " + turn.text + " ASSISTANT:", False)
            pointers.extend(turn.pointers)
        elif turn.role == "assistant":
            if prompt_only:
                break
            off = put(turn.text + " </s>", True)
            toks = ids[off:]
            grd_pos.extend(off + i for i, t in enumerate(toks) if t in (vocab.grd, vocab.grd_end))
            spans.extend(turn.spans)
        else:
            raise LayoutError("system messages may only open the conversation")
    return ids, targets, pointers, spans, grd_pos


def prepare(conv: GroundedConversation, vocab: Vocabulary, max_seq: int,
            prompt_only: bool = False) -> Example:
    """Lay out ``conv`` for training (or, with ``prompt_only``, for decoding)."""
    ids, targets, pointers, spans, grd_pos = _encode_turns(conv, vocab, prompt_only)
    if len(grd_pos) != 2 * len(spans):
        raise LayoutError("grounding tokens do not pair up with the annotated spans")
    h, w = conv.proposals.shape
    phrases = []
    for k, span in enumerate(spans):
        s = span.supervision
        mask = s.union(h, w) if s.kind == "mask" else None
        phrases.append(PhraseTarget(grd_pos[2 * k], grd_pos[2 * k + 1], s.kind, mask, s.box))
    ex = Example(
        feats=pooled_features(conv.scene, conv.proposals),
        masks=np.asarray(conv.proposals.masks),
        ids=np.asarray(ids, dtype=np.int64),
        targets=np.asarray(targets, dtype=bool),
        ptr=bind_pointers(ids, pointers, conv.proposals, vocab),
        phrases=phrases,
        provenance=conv.proposals.provenance,
        sample_id=conv.sample_id,
    )
    if ex.length > max_seq:
        raise LayoutError(f"sequence of {ex.length} positions exceeds max_seq={max_seq}")
    return ex


def prompt_example(scene: Scene, proposals: ProposalSet, user_text: str, vocab: Vocabulary,
                   max_seq: int, pointers: Sequence = (), system: Optional[str] = None) -> Example:
    """Decoding prompt for a single user utterance."""
    ids = ([] if system is None else vocab.tokenize(system))
    ids += vocab.tokenize("<s> USER: " + user_text + " ASSISTANT:")
    ex = Example(
        feats=pooled_features(scene, proposals),
        masks=np.asarray(proposals.masks),
        ids=np.asarray(ids, dtype=np.int64),
        targets=np.zeros(len(ids), dtype=bool),
        ptr=bind_pointers(ids, list(pointers), proposals, vocab),
        provenance=proposals.provenance,
    )
    if ex.length > max_seq:
        raise LayoutError(f"prompt of {ex.length} positions exceeds max_seq={max_seq}")
    return ex
