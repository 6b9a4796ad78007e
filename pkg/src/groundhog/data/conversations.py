"""Grounded conversations for the four task types, plus schema validation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..masks import (BinaryMask, Box, ProposalSet, RleMask, mask_to_box, rle_decode,
                     rle_encode)
from .scenes import COLORS, SHAPES, Scene

SCHEMA = "m3g2-toy/1"
TASKS = ("GCAP", "RES", "GVQA", "RD")
ROLES = ("system", "user", "assistant")

GCAP_TEMPLATES = (
    "Describe the image briefly.",
    "Describe the image in a few words.",
    "Describe the image in a short sentence.",
    "Generate a short caption for the picture.",
    "Caption the image in a few words.",
)
RES_TEMPLATES = (
    "Segment: {}.",
    "Help me segment out {}.",
    "Help me localize {}.",
    "Help me highlight the region of {}.",
    "Show me where to find {} in this photo.",
    "Identify and mark the region of {} for me.",
    "Could you please segment out {} in the image?",
)
PRESENCE_TEMPLATES = (
    "Is {} present in the image?",
    "Is there any {} in this image?",
)
COUNT_TEMPLATES = (
    "How many {} can you see in this image?",
    "Count the number of {}.",
)
RD_TEMPLATES = (
    "Describe it <PTR>.",
    "Describe the region <PTR> in a few words.",
    "Describe the region <PTR> in a short phrase.",
    "Describe the selected area <PTR>.",
    "Describe the selected area <PTR> uniquely.",
)

NUMBER_WORDS = ("no", "one", "two", "three", "four", "five", "six")
PLURALS = {"square": "squares", "disc": "discs", "triangle": "triangles"}
REGION_PHRASES = {"sky": "in the sky", "ground": "on the ground"}
NO_TARGET_REPLY = "Sorry, I cannot find <GRD> {} </GRD> in the image."

RES_KINDS = ("single", "multi", "negative")


class ConversationError(ValueError):
    """Schema violation or a task that the scene cannot support."""


@dataclass(frozen=True, eq=False)
class Supervision:
    """Per-span target: a set of masks, one box, or nothing."""

    kind: str = "none"
    masks: tuple[BinaryMask, ...] = ()
    box: Optional[Box] = None

    def __post_init__(self):
        if self.kind not in ("mask", "box", "none"):
            raise ConversationError(f"unknown supervision kind {self.kind!r}")
        if self.kind == "box" and self.box is None:
            raise ConversationError("box supervision needs a box")
        if self.kind != "mask" and self.masks:
            raise ConversationError("only mask supervision carries masks")
        if self.kind != "box" and self.box is not None:
            raise ConversationError("only box supervision carries a box")

    def union(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        for m in self.masks:
            out |= m.bits
        return out


@dataclass(frozen=True, eq=False)
class Span:
    """Character offsets of one ``<GRD> ... </GRD>`` run inside a turn."""

    start: int
    end: int
    supervision: Supervision = Supervision()


@dataclass(frozen=True, eq=False)
class Turn:
    role: str
    text: str
    spans: tuple[Span, ...] = ()
    pointers: tuple[Union[Box, BinaryMask], ...] = ()


@dataclass(frozen=True, eq=False)
class GroundedConversation:
    turns: tuple[Turn, ...]
    task: str
    source: str
    scene: Scene
    proposals: ProposalSet
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    def assistant_spans(self) -> list[Span]:
        return [s for t in self.turns if t.role == "assistant" for s in t.spans]

    def pointers(self) -> list[Union[Box, BinaryMask]]:
        return [p for t in self.turns for p in t.pointers]


_GRD_RE = re.compile(r"</?GRD>")


def grd_runs(text: str) -> list[tuple[int, int]]:
    """Offsets of each properly paired, non-nested ``<GRD> ... </GRD>`` run."""
    runs, start = [], None
    for m in _GRD_RE.finditer(text):
        if m.group() == "<GRD>":
            if start is not None:
                raise ConversationError("nested <GRD>")
            start = m.start()
        else:
            if start is None:
                raise ConversationError("</GRD> without an opening <GRD>")
            runs.append((start, m.end()))
            start = None
    if start is not None:
        raise ConversationError("unclosed <GRD>")
    return runs


def validate(conv: GroundedConversation) -> None:
    """Raise ``ConversationError`` unless ``conv`` satisfies the corpus schema."""
    if conv.task not in TASKS:
        raise ConversationError(f"unknown task {conv.task!r}")
    if not conv.turns:
        raise ConversationError("conversation has no turns")
    h, w = conv.scene.height, conv.scene.width
    if len(conv.proposals) == 0 or conv.proposals.shape != (h, w):
        raise ConversationError("proposal set must be non-empty and match the scene raster")
    for turn in conv.turns:
        if turn.role not in ROLES:
            raise ConversationError(f"unknown role {turn.role!r}")
        runs = grd_runs(turn.text)
        if turn.role != "assistant":
            if runs or turn.spans:
                raise ConversationError("grounded spans are only allowed in assistant turns")
        elif [(s.start, s.end) for s in turn.spans] != runs:
            raise ConversationError(f"spans {[(s.start, s.end) for s in turn.spans]} do not "
                                    f"match the <GRD> runs {runs} of {turn.text!r}")
        if turn.text.count("<PTR>") != len(turn.pointers):
            raise ConversationError("pointer count does not match <PTR> occurrences")
        for p in turn.pointers:
            if isinstance(p, BinaryMask) and p.shape != (h, w):
                raise ConversationError("pointer mask does not match the scene raster")
            if isinstance(p, Box) and (p.x1 > w or p.y1 > h):
                raise ConversationError("pointer box exceeds the scene raster")
        for s in turn.spans:
            for m in s.supervision.masks:
                if m.shape != (h, w):
                    raise ConversationError("supervision mask does not match the scene raster")


def _region_word(region: str) -> str:
    return REGION_PHRASES[region]


def referring_expression(scene: Scene, idx: int, article: str = "the") -> str:
    """Shortest unambiguous description: color + shape, plus region when needed."""
    e = scene.entities[idx]
    expr = f"{article} {e.color} {e.shape}"
    if len(scene.find(e.color, e.shape)) > 1:
        expr += " " + _region_word(e.region)
    return expr


def full_description(scene: Scene, idx: int) -> str:
    e = scene.entities[idx]
    return f"the {e.color} {e.shape} {_region_word(e.region)}"


def _supervise(masks: list[BinaryMask], box_only: bool) -> Supervision:
    if not box_only:
        return Supervision("mask", tuple(masks))
    merged = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        merged |= m.bits
    if not merged.any():
        return Supervision("none")
    return Supervision("box", box=mask_to_box(BinaryMask(merged)))


def _assistant(text: str, sups: list[Supervision]) -> Turn:
    runs = grd_runs(text)
    if len(runs) != len(sups):
        raise ConversationError("one supervision per grounded span required")
    return Turn("assistant", text, tuple(Span(a, b, s) for (a, b), s in zip(runs, sups)))


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def absent_pairs(scene: Scene) -> list[tuple[str, str]]:
    present = {(e.color, e.shape) for e in scene.entities}
    return [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]


def twin_pairs(scene: Scene) -> list[tuple[str, str]]:
    seen = {}
    for e in scene.entities:
        seen.setdefault((e.color, e.shape), []).append(e)
    return [k for k, v in seen.items() if len(v) > 1]


def res_kinds_available(scene: Scene) -> list[str]:
    kinds = []
    if scene.entities:
        kinds.append("single")
    if twin_pairs(scene):
        kinds.append("multi")
    if absent_pairs(scene):
        kinds.append("negative")
    return kinds


def make_conversation(scene: Scene, proposals: ProposalSet, task: str, template_seed,
                      *, res_kind: str = "single", box_only: bool = False,
                      presence_positive: Optional[bool] = None, pointer_kind: str = "box",
                      source: Optional[str] = None, sample_id: str = "") -> GroundedConversation:
    """Fill a drawn template and build the grounded reply from scene ground truth."""
    rng = np.random.default_rng(template_seed)
    n = len(scene.entities)
    meta: dict = {}
    if task == "GCAP":
        user = Turn("user", _pick(rng, GCAP_TEMPLATES))
        if n == 0:
            reply = _assistant("The image is empty.", [])
        else:
            parts, sups = [], []
            for i, e in enumerate(scene.entities):
                parts.append(f"<GRD> a {e.color} {e.shape} </GRD> {_region_word(e.region)}")
                sups.append(_supervise([e.mask], box_only))
            body = parts[0] if n == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
            reply = _assistant(f"There is {body}.", sups)
    elif task == "RES":
        if res_kind not in res_kinds_available(scene):
            raise ConversationError(f"scene cannot support a {res_kind!r} RES query")
        template = _pick(rng, RES_TEMPLATES)
        if res_kind == "single":
            idx = int(rng.integers(n))
            e = scene.entities[idx]
            target = [e.mask]
            expr = referring_expression(scene, idx)
            if e.parts and rng.random() < 0.5:
                name, part = sorted(e.parts.items())[0]
                expr = f"the {name} of {expr[len('the '):]}"
                target = [part]
            reply = _assistant(f"Here it is: <GRD> {expr} </GRD>", [_supervise(target, box_only)])
            meta["targets"] = [idx]
        elif res_kind == "multi":
            color, shape = _pick(rng, twin_pairs(scene))
            idxs = scene.find(color, shape)
            expr = f"both {color} {PLURALS[shape]}"
            reply = _assistant(f"Here they are: <GRD> {expr} </GRD>",
                               [_supervise([scene.entities[i].mask for i in idxs], box_only)])
            meta["targets"] = idxs
        else:
            color, shape = _pick(rng, absent_pairs(scene))
            expr = f"the {color} {shape}"
            # the empty target always stays mask supervision: no box exists
            reply = _assistant(NO_TARGET_REPLY.format(expr),
                               [Supervision("mask", (BinaryMask.zeros(scene.height, scene.width),))])
            meta["targets"] = []
        meta["res_kind"] = res_kind
        user = Turn("user", template.format(expr))
    elif task == "GVQA":
        if rng.random() < 0.5 or presence_positive is not None:
            positive = bool(rng.random() < 0.5) if presence_positive is None else presence_positive
            if positive and n == 0:
                raise ConversationError("a positive presence question needs an entity")
            if not positive and not absent_pairs(scene):
                raise ConversationError("a negative presence question needs an absent entity")
            if positive:
                e = scene.entities[int(rng.integers(n))]
                color, shape = e.color, e.shape
            else:
                color, shape = _pick(rng, absent_pairs(scene))
            phrase = f"{color} {shape}"
            template = _pick(rng, PRESENCE_TEMPLATES)
            asked = f"a {phrase}" if template.startswith("Is {}") else phrase
            user = Turn("user", template.format(asked))
            if positive:
                idxs = scene.find(color, shape)
                reply = _assistant(f"Yes, <GRD> the {phrase} </GRD> is present.",
                                   [_supervise([scene.entities[i].mask for i in idxs], box_only)])
            else:
                reply = _assistant("No.", [])
            meta["qa"] = "presence"
            meta["answer"] = "yes" if positive else "no"
        else:
            color, shape = _pick(rng, COLORS), _pick(rng, SHAPES)
            idxs = scene.find(color, shape)
            phrase = f"{color} {PLURALS[shape]}"
            user = Turn("user", _pick(rng, COUNT_TEMPLATES).format(phrase))
            if idxs:
                verb = "is" if len(idxs) == 1 else "are"
                noun = f"{color} {shape}" if len(idxs) == 1 else phrase
                reply = _assistant(f"There {verb} {NUMBER_WORDS[len(idxs)]} <GRD> {noun} </GRD>.",
                                   [_supervise([scene.entities[i].mask for i in idxs], box_only)])
            else:
                reply = _assistant(f"There are no {phrase}.", [])
            meta["qa"] = "count"
            meta["answer"] = NUMBER_WORDS[len(idxs)]
    elif task == "RD":
        if n == 0:
            raise ConversationError("referential dialogue needs an entity to point at")
        idx = int(rng.integers(n))
        e = scene.entities[idx]
        pointer = mask_to_box(e.mask) if pointer_kind == "box" else e.mask
        user = Turn("user", _pick(rng, RD_TEMPLATES), pointers=(pointer,))
        reply = _assistant(f"It is <GRD> {full_description(scene, idx)} </GRD>.",
                           [_supervise([e.mask], box_only)])
        meta["targets"] = [idx]
    else:
        raise ConversationError(f"unknown task {task!r}")
    if source is None:
        source = f"{task.lower()}-{'box' if box_only else 'mask'}"
    conv = GroundedConversation((user, reply), task, source, scene, proposals, sample_id, meta)
    validate(conv)
    return conv


# -- JSON codec ---------------------------------------------------------------

def _pointer_json(p):
    if isinstance(p, Box):
        return {"box": p.as_list()}
    return {"mask": rle_encode(p).to_json()}


def _pointer_from(obj):
    if "box" in obj:
        return Box.from_list(obj["box"])
    return rle_decode(RleMask.from_json(obj["mask"]))


def _sup_json(s: Supervision) -> dict:
    if s.kind == "mask":
        return {"kind": "mask", "masks": [rle_encode(m).to_json() for m in s.masks]}
    if s.kind == "box":
        return {"kind": "box", "box": s.box.as_list()}
    return {"kind": "none"}


def _sup_from(obj: dict) -> Supervision:
    kind = obj.get("kind", "none")
    if kind == "mask":
        return Supervision("mask", tuple(rle_decode(RleMask.from_json(m)) for m in obj["masks"]))
    if kind == "box":
        return Supervision("box", box=Box.from_list(obj["box"]))
    return Supervision(kind)


def proposals_to_json(p: ProposalSet) -> dict:
    return {"masks": [rle_encode(p.binary(i)).to_json() for i in range(len(p))],
            "provenance": list(p.provenance)}


def proposals_from_json(obj: dict) -> ProposalSet:
    masks = [rle_decode(RleMask.from_json(m)) for m in obj["masks"]]
    return ProposalSet.from_masks(masks, obj.get("provenance", ()))


def to_json(conv: GroundedConversation) -> dict:
    return {
        "schema": SCHEMA,
        "id": conv.sample_id,
        "task": conv.task,
        "source": conv.source,
        "meta": conv.meta,
        "scene": conv.scene.to_json(),
        "proposals": proposals_to_json(conv.proposals),
        "turns": [{
            "role": t.role,
            "text": t.text,
            "spans": [{"start": s.start, "end": s.end, "supervision": _sup_json(s.supervision)}
                      for s in t.spans],
            "pointers": [_pointer_json(p) for p in t.pointers],
        } for t in conv.turns],
    }


def from_json(obj: dict) -> GroundedConversation:
    """Decode and validate one corpus record."""
    if obj.get("schema") != SCHEMA:
        raise ConversationError(f"unsupported schema {obj.get('schema')!r}")
    try:
        turns = tuple(Turn(
            t["role"], t["text"],
            tuple(Span(int(s["start"]), int(s["end"]), _sup_from(s["supervision"]))
                  for s in t.get("spans", [])),
            tuple(_pointer_from(p) for p in t.get("pointers", [])),
        ) for t in obj["turns"])
        conv = GroundedConversation(turns, obj["task"], obj["source"],
                                    Scene.from_json(obj["scene"]),
                                    proposals_from_json(obj["proposals"]),
                                    obj.get("id", ""), obj.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConversationError):
            raise
        raise ConversationError(f"malformed record: {exc}") from exc
    validate(conv)
    return conv
