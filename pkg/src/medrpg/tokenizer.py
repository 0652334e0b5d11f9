"""Phrase tokenizers.

Any object with ``encode(phrase, max_len)``, ``vocab_size`` and ``to_list()``
can stand in for :class:`WordTokenizer`; the model only sees integer ids.
"""

from __future__ import annotations

import re
from typing import Iterable, Protocol

from .errors import InputError

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = range(4)

_WORD = re.compile(r"[\w']+")


class Tokenizer(Protocol):
    vocab_size: int

    def encode(self, phrase: str, max_len: int) -> list[int]: ...

    def to_list(self) -> list[str]: ...


def split_words(phrase: str) -> list[str]:
    return _WORD.findall(phrase.lower())


class WordTokenizer:
    """Lower-cased word lookup over a vocabulary collected from a corpus."""

    def __init__(self, vocab: Iterable[str]):
        words = list(vocab)
        if tuple(words[:4]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.itos = words
        self.stoi = {w: i for i, w in enumerate(words)}

    @classmethod
    def from_corpus(cls, phrases: Iterable[str]) -> "WordTokenizer":
        seen = sorted({w for p in phrases for w in split_words(p)})
        return cls(list(SPECIALS) + seen)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def to_list(self) -> list[str]:
        return list(self.itos)

    def encode(self, phrase: str, max_len: int) -> list[int]:
        """``[CLS] w1 .. wn [SEP] [PAD]...`` of exactly ``max_len`` ids."""
        words = split_words(phrase)
        if not words:
            raise InputError(f"empty phrase {phrase!r}")
        if max_len < 3:
            raise InputError(f"max_len must leave room for one word, got {max_len}")
        body = [self.stoi.get(w, UNK_ID) for w in words[:max_len - 2]]
        ids = [CLS_ID] + body + [SEP_ID]
        return ids + [PAD_ID] * (max_len - len(ids))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i != PAD_ID]
