"""Closed-vocabulary word-level tokenizer with optional concept-name splitting."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .const import (
    BOT_TOKEN,
    CONCEPT_ENDING,
    CONCEPT_SUFFIX,
    EOS_TOKEN,
    EOT_TOKEN,
    PAD_TOKEN,
    PAUSE_TOKEN,
    SPECIAL_TOKENS,
)
from .errors import DataError, TokenizationError

_LOGGER = logging.getLogger(__name__)

_WORD_RE = re.compile(r"<[a-z]+>|[A-Za-z0-9]+|[^\sA-Za-z0-9]")
_CONCEPT_RE = re.compile(r"^[a-z]+pus$")
_ATTACH_LEFT = frozenset(".,?!:;")


def split_word(word: str, subword: bool) -> list[str]:
    """Segment one surface word; concept names become stem + marked suffix in subword mode."""
    if subword and _CONCEPT_RE.match(word):
        return [word[: -len(CONCEPT_ENDING)], CONCEPT_SUFFIX]
    return [word]


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token strings with dense ids; specials come first."""

    tokens: tuple[str, ...]
    subword: bool = True
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for i, token in enumerate(self.tokens):
            if token in index:
                raise DataError(f"Duplicate vocabulary entry {token!r}")
            index[token] = i
        missing = [s for s in SPECIAL_TOKENS if s not in index]
        if missing:
            raise DataError(f"Vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError as err:
            raise TokenizationError(token) from err

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return self._index[PAD_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._index[EOS_TOKEN]

    @property
    def bot_id(self) -> int:
        return self._index[BOT_TOKEN]

    @property
    def eot_id(self) -> int:
        return self._index[EOT_TOKEN]

    @property
    def pause_id(self) -> int:
        return self._index[PAUSE_TOKEN]

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self)

    def detokenize(self, ids: Iterable[int]) -> str:
        return detokenize(ids, self)

    @classmethod
    def build(cls, words: Iterable[str], subword: bool = True) -> Vocabulary:
        """Build a vocabulary from surface words, in first-seen order."""
        seen: dict[str, None] = dict.fromkeys(SPECIAL_TOKENS)
        for word in words:
            for piece in split_word(word, subword):
                seen.setdefault(piece)
        return cls(tuple(seen), subword)

    @classmethod
    def for_prosqa(cls, subword: bool = True) -> Vocabulary:
        """The closed vocabulary covering everything the ProsQA generator emits."""
        from .prosqa import FRAME_WORDS, PERSON_NAMES, concept_inventory

        words = list(FRAME_WORDS) + list(PERSON_NAMES) + concept_inventory()
        return cls.build(words, subword)

    @classmethod
    def from_examples(cls, examples: Iterable[object], subword: bool = True) -> Vocabulary:
        """Build a vocabulary from every word in a corpus of reasoning examples."""

        def words() -> Iterable[str]:
            for example in examples:
                for text in (example.question, *example.steps, example.answer):
                    yield from _WORD_RE.findall(text)

        vocab = cls.build(words(), subword)
        _LOGGER.info("Built corpus vocabulary with %d entries", len(vocab))
        return vocab


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Segment ``text`` into token ids; raises on the first unknown fragment."""
    ids: list[int] = []
    for word in _WORD_RE.findall(text):
        for piece in split_word(word, vocab.subword):
            if piece not in vocab:
                raise TokenizationError(word)
            ids.append(vocab.id(piece))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` on single-spaced text."""
    out: list[str] = []
    for token_id in ids:
        token = vocab.token(int(token_id))
        if out and vocab.subword and token == CONCEPT_SUFFIX:
            out[-1] += CONCEPT_ENDING
        elif out and token in _ATTACH_LEFT:
            out[-1] += token
        else:
            out.append(token)
    return " ".join(out)


def tokenize_all(texts: Sequence[str], vocab: Vocabulary) -> list[list[int]]:
    return [tokenize(text, vocab) for text in texts]
