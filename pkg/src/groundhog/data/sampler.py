"""Per-source up/down-sampling into one deterministic training stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence, TypeVar, Union

import numpy as np

T = TypeVar("T")
Ratio = Union[int, float, str, Fraction]


def _as_fraction(r: Ratio) -> Fraction:
    f = Fraction(r) if not isinstance(r, float) else Fraction(r).limit_denominator(10**6)
    if f <= 0:
        raise ValueError(f"sampling ratio must be positive, got {r!r}")
    return f


@dataclass(frozen=True)
class SamplerSpec:
    ratios: Mapping[str, Ratio] = field(default_factory=dict)
    seed: int = 0

    def ratio(self, source: str) -> Fraction:
        return _as_fraction(self.ratios.get(source, 1))


def target_count(ratio: Fraction, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    return math.floor(ratio * n + Fraction(1, 2))


def balance_sample(corpora: Mapping[str, Sequence[T]], spec: SamplerSpec):
    """Resample each source to ``round(r * n)`` items and shuffle the union.

    Returns ``(stream, warnings)``. Up-sampling repeats whole passes and then a
    seeded prefix; down-sampling draws a seeded subset without replacement.
    """
    for src in spec.ratios:
        spec.ratio(src)
    stream: list[T] = []
    warnings: list[dict] = []
    for k, source in enumerate(sorted(corpora)):
        items = list(corpora[source])
        ratio = spec.ratio(source)
        if not items:
            warnings.append({"source": source, "warning": "empty corpus with positive ratio"})
            continue
        n = len(items)
        want = target_count(ratio, n)
        rng = np.random.default_rng([spec.seed, k])
        passes, rest = divmod(want, n)
        stream.extend(items * passes)
        stream.extend(items[i] for i in rng.permutation(n)[:rest])
    order = np.random.default_rng([spec.seed, len(corpora)]).permutation(len(stream))
    return [stream[i] for i in order], warnings
