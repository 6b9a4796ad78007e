"""Corpus configuration, deterministic generation and JSON Lines IO."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .conversations import (RES_KINDS, TASKS, ConversationError, GroundedConversation,
                            from_json, make_conversation, res_kinds_available, to_json)
from .scenes import PerturbSpec, SceneConfig, SceneError, gen_proposals, gen_scene


class CorpusError(ValueError):
    """A corpus file or config that cannot be used; carries the line number if known."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class CorpusConfig:
    tasks: dict = field(default_factory=lambda: {"RES": 1.0})
    res_kinds: dict = field(default_factory=lambda: {"single": 0.7, "multi": 0.15,
                                                     "negative": 0.15})
    min_entities: int = 3
    max_entities: int = 4
    twin_prob: float = 0.3
    allow_parts: bool = False
    min_size: int = 12
    max_size: int = 12
    perturb: PerturbSpec = PerturbSpec(shift_px=4, dilate=2, split=False, n_distractors=3,
                                       erode=False)
    box_only: bool = False
    pointer_kind: str = "box"
    res_rounds: int = 1  # query/answer rounds per RES conversation; only the first is scored

    def __post_init__(self):
        bad = set(self.tasks) - set(TASKS)
        if bad or not self.tasks or min(self.tasks.values()) < 0 or sum(self.tasks.values()) <= 0:
            raise CorpusError(f"invalid task proportions {self.tasks}")
        bad = set(self.res_kinds) - set(RES_KINDS)
        if bad or min(self.res_kinds.values(), default=0) < 0:
            raise CorpusError(f"invalid RES kind weights {self.res_kinds}")
        if not 0 <= self.min_entities <= self.max_entities:
            raise CorpusError("need 0 <= min_entities <= max_entities")
        if self.res_rounds < 1:
            raise CorpusError("res_rounds must be at least 1")
        if self.pointer_kind not in ("box", "mask", "mixed"):
            raise CorpusError(f"unknown pointer kind {self.pointer_kind!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise CorpusError(f"unknown corpus config keys {sorted(unknown)}")
        obj = dict(obj)
        if "perturb" in obj:
            obj["perturb"] = PerturbSpec(**obj["perturb"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise CorpusError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def scene_config(self, n_entities: int, twin_prob: float) -> SceneConfig:
        return SceneConfig(n_entities=n_entities, allow_parts=self.allow_parts,
                           twin_prob=twin_prob, min_size=self.min_size, max_size=self.max_size)


def _draw(rng, weights: dict) -> str:
    keys = sorted(weights)
    p = np.array([weights[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def gen_sample(config: CorpusConfig, seed: int, i: int, max_tries: int = 100) -> GroundedConversation:
    """Sample ``i`` of the corpus seeded by ``seed``; independent of other samples."""
    rng = np.random.default_rng([seed, i, 0])
    task = _draw(rng, config.tasks)
    res_kind = _draw(rng, config.res_kinds) if task == "RES" else "single"
    twin_prob = 1.0 if res_kind == "multi" else config.twin_prob
    pointer_kind = config.pointer_kind
    if pointer_kind == "mixed":
        pointer_kind = "box" if rng.random() < 0.5 else "mask"
    for attempt in range(max_tries):
        n = int(rng.integers(config.min_entities, config.max_entities + 1))
        if task in ("RD",) or (task == "RES" and res_kind != "negative"):
            n = max(n, 1)
        if res_kind == "multi":
            n = max(n, 2)
        try:
            scene = gen_scene([seed, i, 1, attempt], config.scene_config(n, twin_prob))
        except SceneError:
            continue
        if task == "RES" and res_kind not in res_kinds_available(scene):
            continue
        proposals = gen_proposals(scene, config.perturb, [seed, i, 2, attempt])
        try:
            conv = make_conversation(scene, proposals, task, [seed, i, 3], res_kind=res_kind,
                                     box_only=config.box_only, pointer_kind=pointer_kind,
                                     sample_id=f"{seed}-{i}")
        except ConversationError:
            continue
        if task == "RES" and config.res_rounds > 1:
            conv = _more_rounds(conv, config, seed, i)
        return conv
    raise CorpusError(f"could not generate sample {i} ({task}/{res_kind}) in {max_tries} tries")


def _more_rounds(conv: GroundedConversation, config: CorpusConfig, seed: int,
                 i: int) -> GroundedConversation:
    """Append further RES rounds about the same scene, kinds drawn from those it supports."""
    kinds = {k: w for k, w in config.res_kinds.items()
             if w > 0 and k in res_kinds_available(conv.scene)}
    turns = list(conv.turns)
    for r in range(1, config.res_rounds):
        kind = _draw(np.random.default_rng([seed, i, 4, r]), kinds)
        extra = make_conversation(conv.scene, conv.proposals, "RES", [seed, i, 3, r],
                                  res_kind=kind, box_only=config.box_only,
                                  sample_id=conv.sample_id)
        turns.extend(extra.turns)
    return replace(conv, turns=tuple(turns))


def gen_corpus(config: CorpusConfig, n: int, seed: int) -> list[GroundedConversation]:
    return [gen_sample(config, seed, i) for i in range(n)]


def task_counts(convs: Iterable[GroundedConversation]) -> dict:
    c = Counter(conv.task for conv in convs)
    return {t: c.get(t, 0) for t in TASKS}


def write_corpus(path, convs: Iterable[GroundedConversation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(json.dumps(to_json(conv), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def iter_corpus(path) -> Iterator[GroundedConversation]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield from_json(json.loads(line))
            except (json.JSONDecodeError, ConversationError, ValueError) as exc:
                raise CorpusError(str(exc), lineno) from exc


def read_corpus(path) -> list[GroundedConversation]:
    return list(iter_corpus(Path(path)))
