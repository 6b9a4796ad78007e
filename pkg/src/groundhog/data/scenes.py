"""Synthetic grounded scenes, proposal oracle and stand-in backbone encoders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..features import FeatureMap
from ..masks import BinaryMask, ProposalSet, rle_decode, rle_encode, RleMask

HEIGHT = WIDTH = 32
GRID = 8
BACKGROUND = 0
COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "white")
SHAPES = ("square", "disc", "triangle")
REGIONS = ("sky", "ground")
N_COLOR_CHANNELS = len(COLORS) + 1  # background is channel 0
N_SHAPE_CHANNELS = 4


class SceneError(RuntimeError):
    """Raised when a scene cannot be generated as configured."""


@dataclass(frozen=True, eq=False)
class Entity:
    mask: BinaryMask
    color: str
    shape: str
    region: str
    parts: dict = field(default_factory=dict)

    @property
    def attrs(self) -> tuple[str, str, str]:
        return (self.color, self.shape, self.region)


@dataclass(frozen=True, eq=False)
class Scene:
    entities: tuple[Entity, ...]
    height: int = HEIGHT
    width: int = WIDTH

    def color_raster(self) -> np.ndarray:
        raster = np.full((self.height, self.width), BACKGROUND, dtype=np.int64)
        for e in self.entities:
            raster[e.mask.bits] = COLORS.index(e.color) + 1
        return raster

    def region_raster(self) -> np.ndarray:
        rows = np.arange(self.height)[:, None] >= self.height // 2
        return np.broadcast_to(rows, (self.height, self.width)).astype(np.int64)

    def occupancy(self) -> np.ndarray:
        occ = np.zeros((self.height, self.width), dtype=bool)
        for e in self.entities:
            occ |= e.mask.bits
        return occ

    def find(self, color: str, shape: str, region: Optional[str] = None) -> list[int]:
        return [i for i, e in enumerate(self.entities)
                if e.color == color and e.shape == shape and (region is None or e.region == region)]

    def to_json(self) -> dict:
        return {
            "h": self.height,
            "w": self.width,
            "entities": [{
                "color": e.color, "shape": e.shape, "region": e.region,
                "mask": rle_encode(e.mask).to_json(),
                "parts": {k: rle_encode(v).to_json() for k, v in e.parts.items()},
            } for e in self.entities],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        ents = []
        for e in obj["entities"]:
            ents.append(Entity(
                mask=rle_decode(RleMask.from_json(e["mask"])),
                color=e["color"], shape=e["shape"], region=e["region"],
                parts={k: rle_decode(RleMask.from_json(v)) for k, v in e.get("parts", {}).items()},
            ))
        return cls(tuple(ents), int(obj["h"]), int(obj["w"]))


@dataclass(frozen=True)
class SceneConfig:
    n_entities: int = 4
    allow_parts: bool = False
    allow_negatives: bool = True
    # chance that an entity gets a same-colour, same-shape twin in the other region
    twin_prob: float = 0.0
    min_size: int = 6
    max_size: int = 9
    max_per_region: int = 3
    max_restarts: int = 20


def shape_raster(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of a shape."""
    r = np.arange(size)[:, None] + 0.5
    c = np.arange(size)[None, :] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        half = size / 2.0
        return (r - half) ** 2 + (c - half) ** 2 <= half * half
    if shape == "triangle":
        # apex up; row i spans a half-width proportional to its depth
        return np.abs(c - size / 2.0) <= r / 2.0 + 0.25
    raise ValueError(f"unknown shape {shape!r}")


def triangle_tip(footprint: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(footprint.any(axis=1))
    cut = rows[0] + max(1, len(rows) // 3)
    tip = footprint.copy()
    tip[cut:] = False
    return tip


def _place(rng, occupied: np.ndarray, size: int, region: str):
    """Uniformly drawn top-left corner of a free ``size`` square in the region band.

    A spot is free when the square plus a one-pixel margin touches no occupied
    pixel, so entities never touch. Returns None when no spot is free.
    """
    band = (0, HEIGHT // 2) if region == "sky" else (HEIGHT // 2, HEIGHT)
    # window sums of the margin-padded raster via an integral image
    pad = np.pad(np.pad(occupied, 1).astype(np.int64), ((1, 0), (1, 0)))
    integral = pad.cumsum(axis=0).cumsum(axis=1)
    k = size + 2
    win = integral[k:, k:] - integral[:-k, k:] - integral[k:, :-k] + integral[:-k, :-k]
    free = win[band[0] : band[1] - size + 1, : WIDTH - size + 1] == 0
    spots = np.argwhere(free)
    if not len(spots):
        return None
    y0, x0 = spots[int(rng.integers(len(spots)))]
    return band[0] + int(y0), int(x0)


def gen_scene(seed, config: SceneConfig = SceneConfig(),
              attrs: Optional[list[tuple[str, str, str]]] = None) -> Scene:
    """Sample a scene whose entities have unique (color, shape, region) triples.

    ``attrs`` pins the attribute triples instead of drawing them.
    """
    if not 0 <= config.n_entities <= config.max_per_region * len(REGIONS):
        raise SceneError(f"n_entities must lie in [0, {config.max_per_region * len(REGIONS)}]")
    rng = np.random.default_rng(seed)
    if attrs is None:
        attrs = []
        used = set()
        while len(attrs) < config.n_entities:
            a = (COLORS[rng.integers(len(COLORS))], SHAPES[rng.integers(len(SHAPES))],
                 REGIONS[rng.integers(len(REGIONS))])
            if a in used or sum(x[2] == a[2] for x in attrs) >= config.max_per_region:
                continue
            attrs.append(a)
            used.add(a)
            twin = (a[0], a[1], "ground" if a[2] == "sky" else "sky")
            if (len(attrs) < config.n_entities and twin not in used
                    and sum(x[2] == twin[2] for x in attrs) < config.max_per_region
                    and rng.random() < config.twin_prob):
                attrs.append(twin)
                used.add(twin)
    if len(set(attrs)) != len(attrs):
        raise SceneError("entity attribute triples must be unique")

    for _ in range(config.max_restarts):
        entities = _layout(rng, attrs, config)
        if entities is not None:
            return Scene(tuple(entities))
    raise SceneError(f"could not place {len(attrs)} entities after "
                     f"{config.max_restarts} restarts")


def _layout(rng, attrs, config: SceneConfig) -> Optional[list[Entity]]:
    occupied = np.zeros((HEIGHT, WIDTH), dtype=bool)
    entities = []
    for color, shape, region in attrs:
        size = int(rng.integers(config.min_size, config.max_size + 1))
        spot = _place(rng, occupied, size, region)
        if spot is None:
            return None
        y0, x0 = spot
        foot = shape_raster(shape, size)
        bits = np.zeros((HEIGHT, WIDTH), dtype=bool)
        bits[y0 : y0 + size, x0 : x0 + size] = foot
        occupied |= bits
        parts = {}
        if config.allow_parts and shape == "triangle":
            tip = np.zeros_like(bits)
            tip[y0 : y0 + size, x0 : x0 + size] = triangle_tip(foot)
            parts["tip"] = BinaryMask(tip)
        entities.append(Entity(BinaryMask(bits), color, shape, region, parts))
    return entities


@dataclass(frozen=True)
class PerturbSpec:
    shift_px: int = 2
    dilate: int = 1
    split: bool = True
    n_distractors: int = 0
    erode: bool = True  # with ``dilate`` > 0, also draw eroded variants

    @property
    def enabled(self) -> bool:
        return self.n_distractors > 0


def _shift(bits: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(bits)
    h, w = bits.shape
    src = bits[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    out[max(dy, 0) : max(dy, 0) + src.shape[0], max(dx, 0) : max(dx, 0) + src.shape[1]] = src
    return out


def _dilate(bits: np.ndarray, k: int) -> np.ndarray:
    out = bits.copy()
    for _ in range(k):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _erode(bits: np.ndarray, k: int) -> np.ndarray:
    return ~_dilate(~bits, k)


def _split(bits: np.ndarray, rng) -> np.ndarray:
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    out = bits.copy()
    if rng.random() < 0.5:
        mid = (cols[0] + cols[-1] + 1) // 2
        if rng.random() < 0.5:
            out[:, mid:] = False
        else:
            out[:, :mid] = False
    else:
        mid = (rows[0] + rows[-1] + 1) // 2
        if rng.random() < 0.5:
            out[mid:] = False
        else:
            out[:mid] = False
    return out


def oracle_masks(scene: Scene) -> list[BinaryMask]:
    out = []
    for e in scene.entities:
        out.append(e.mask)
        out.extend(e.parts.values())
    return out


def gen_proposals(scene: Scene, perturb: PerturbSpec = PerturbSpec(), seed=0) -> ProposalSet:
    """Oracle masks of every entity and part plus perturbed distractors.

    Proposal order is a seeded shuffle so position carries no label.
    """
    rng = np.random.default_rng(seed)
    oracle = [m.bits for m in oracle_masks(scene)]
    masks = list(oracle)
    tags = ["oracle"] * len(oracle)
    kinds = []
    if perturb.shift_px > 0:
        kinds.append("shift")
    if perturb.dilate > 0:
        kinds.append("dilate")
    if perturb.split:
        kinds.append("split")
    seen = {m.tobytes() for m in masks}
    attempts = 0
    while oracle and kinds and tags.count("distractor") < perturb.n_distractors:
        attempts += 1
        if attempts > 50 * perturb.n_distractors:
            break
        parent = oracle[rng.integers(len(oracle))]
        kind = kinds[rng.integers(len(kinds))]
        if kind == "shift":
            dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][rng.integers(4)]
            cand = _shift(parent, dy * perturb.shift_px, dx * perturb.shift_px)
        elif kind == "dilate":
            grow = rng.random() < 0.5 or not perturb.erode
            cand = _dilate(parent, perturb.dilate) if grow else _erode(parent, perturb.dilate)
        else:
            cand = _split(parent, rng)
        key = cand.tobytes()
        if not cand.any() or key in seen:
            continue
        seen.add(key)
        masks.append(cand)
        tags.append("distractor")
    if not masks:
        # an empty scene still needs one poolable proposal: the whole raster
        masks = [np.ones((scene.height, scene.width), dtype=bool)]
        tags = ["distractor"]
    order = rng.permutation(len(masks))
    return ProposalSet(np.stack([masks[i] for i in order]).astype(np.float64),
                       tuple(tags[i] for i in order))


def encode_backbones(scene: Scene) -> tuple[FeatureMap, FeatureMap]:
    """Two deterministic stand-in backbones on an 8x8 grid.

    A: per-block color histogram (background in channel 0).
    B: occupancy, horizontal-edge count, vertical-edge count, region id.
    """
    bh, bw = scene.height // GRID, scene.width // GRID
    colors = scene.color_raster()
    onehot = np.eye(N_COLOR_CHANNELS)[colors]  # (H, W, C)
    a = onehot.reshape(GRID, bh, GRID, bw, N_COLOR_CHANNELS).mean(axis=(1, 3))
    a = np.moveaxis(a, -1, 0)

    occ = scene.occupancy()
    pad = np.pad(occ, 1)
    # exposed top/bottom sides of occupied pixels are horizontal edges
    h_edges = occ & ~pad[:-2, 1:-1]
    h_edges = h_edges.astype(np.int64) + (occ & ~pad[2:, 1:-1])
    v_edges = (occ & ~pad[1:-1, :-2]).astype(np.int64) + (occ & ~pad[1:-1, 2:])

    def block(x, reduce):
        return reduce(x.reshape(GRID, bh, GRID, bw), axis=(1, 3))

    b = np.stack([
        block(occ.astype(np.float64), np.mean),
        block(h_edges.astype(np.float64), np.sum),
        block(v_edges.astype(np.float64), np.sum),
        block(scene.region_raster().astype(np.float64), np.mean),
    ])
    return FeatureMap(a), FeatureMap(b)
