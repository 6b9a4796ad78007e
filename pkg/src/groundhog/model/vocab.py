"""Closed template vocabulary and a lossless word tokenizer."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

from ..data import conversations as conv
from ..data.scenes import COLORS, SHAPES

PAD, BOS, EOS, GRD, GRD_END, PTR = "<pad>", "<s>", "</s>", "<GRD>", "</GRD>", "<PTR>"
SPECIALS = (PAD, BOS, EOS, GRD, GRD_END, PTR)
SYSTEM_MESSAGE = "A chat between a curious user and an assistant that grounds every phrase."

_TOKEN_RE = re.compile(r"</?[A-Za-z]+>|[A-Za-z]+:?|[.,?]")
_PUNCT_RE = re.compile(r" ([.,?])")


class VocabError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    """Split on whitespace and detach trailing punctuation; reject anything else."""
    words, pos = [], 0
    for m in _TOKEN_RE.finditer(text):
        if text[pos : m.start()].strip():
            raise VocabError(f"untokenizable text {text[pos:m.start()]!r}")
        words.append(m.group())
        pos = m.end()
    if text[pos:].strip():
        raise VocabError(f"untokenizable text {text[pos:]!r}")
    return words


def join_words(words: Iterable[str]) -> str:
    return _PUNCT_RE.sub(r"\1", " ".join(words))


def _corpus_words() -> list[str]:
    pieces: list[str] = [SYSTEM_MESSAGE, "USER: ASSISTANT:"]
    for group in (conv.GCAP_TEMPLATES, conv.RES_TEMPLATES, conv.PRESENCE_TEMPLATES,
                  conv.COUNT_TEMPLATES, conv.RD_TEMPLATES):
        pieces.extend(t.replace("{}", "") for t in group)
    pieces += [
        "Here it is: Here they are: There is There are It is and both the a of tip",
        conv.NO_TARGET_REPLY.replace("{}", ""),
        "The image is empty. Yes, is present. No. ok",
        " ".join(conv.NUMBER_WORDS), " ".join(COLORS), " ".join(SHAPES),
        " ".join(conv.PLURALS.values()), " ".join(conv.REGION_PHRASES.values()),
    ]
    words = set()
    for p in pieces:
        words.update(split_words(p))
    return sorted(words - set(SPECIALS))


class Vocabulary:
    """Bijective token <-> id map; specials occupy the first ids."""

    def __init__(self, tokens: Sequence[str] | None = None):
        tokens = list(tokens) if tokens is not None else list(SPECIALS) + _corpus_words()
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        if len(tokens) > 512:
            raise VocabError("vocabulary exceeds 512 entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"out-of-vocabulary word {token!r}") from None

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def grd(self) -> int:
        return self.index[GRD]

    @property
    def grd_end(self) -> int:
        return self.index[GRD_END]

    @property
    def ptr(self) -> int:
        return self.index[PTR]

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        return join_words(self.tokens[int(i)] for i in ids)
