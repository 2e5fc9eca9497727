"""Word vectors, phrase tokenization and mean-pooled phrase embeddings."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from qarcnn.errors import FormatError, VocabularyError

_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> tuple[str, ...]:
    tokens = []
    for piece in text.lower().split():
        piece = piece.strip(_EDGE_PUNCT)
        if piece:
            tokens.append(piece)
    return tuple(tokens)


@dataclass(frozen=True)
class Phrase:
    raw: str
    tokens: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.tokens:
            object.__setattr__(self, "tokens", tokenize(self.raw))
        if not self.tokens:
            raise ValueError(f"phrase {self.raw!r} has no tokens")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Phrase":
        tokens = tuple(tokens)
        return cls(" ".join(tokens), tokens)

    def __str__(self):
        return self.raw


class WordVectorTable:
    """Immutable token -> vector lookup.

    Vectors are stored row-wise in one float64 matrix; ``index`` maps each
    token to its row.
    """

    def __init__(self, entries: Mapping[str, Iterable[float]] | None = None, dim: int | None = None):
        entries = dict(entries or {})
        if dim is None:
            if not entries:
                raise ValueError("dim is required for an empty table")
            dim = len(next(iter(entries.values())))
        self.dim = int(dim)
        if self.dim < 1:
            raise ValueError("dim must be positive")
        self.index: dict[str, int] = {}
        rows = []
        for token, vec in entries.items():
            if not token or token != token.lower():
                raise ValueError(f"invalid token {token!r}")
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"token {token!r}: expected {self.dim} components")
            self.index[token] = len(rows)
            rows.append(vec)
        self.vectors = np.array(rows, dtype=np.float64).reshape(len(rows), self.dim)
        self.vectors.setflags(write=False)

    def __len__(self):
        return len(self.index)

    def __contains__(self, token):
        return token in self.index

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[self.index[token]]

    def tokens(self) -> list[str]:
        return list(self.index)


def load_word_vectors(path: str | Path) -> WordVectorTable:
    """Read a word2vec text-format file."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError(f"{path}: malformed header, expected '<count> <dim>'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise FormatError(f"{path}: malformed header {' '.join(header)!r}") from None
        if count < 0 or dim < 1:
            raise FormatError(f"{path}: malformed header, count={count} dim={dim}")
        entries: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise FormatError(
                    f"{path}:{lineno}: dimension mismatch for {token!r} "
                    f"({len(values)} components, expected {dim})"
                )
            if token in entries:
                raise FormatError(f"{path}:{lineno}: duplicate token {token!r}")
            try:
                entries[token] = np.array([float(v) for v in values])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric component") from None
    if len(entries) != count:
        raise FormatError(f"{path}: header declares {count} tokens, found {len(entries)}")
    return WordVectorTable(entries, dim=dim)


def save_word_vectors(table: WordVectorTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for token, row in table.index.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in table.vectors[row]) + "\n")


def embed_phrase(table: WordVectorTable, phrase: Phrase | str) -> np.ndarray:
    """Mean of the in-vocabulary token vectors; unknown tokens are skipped."""
    if isinstance(phrase, str):
        phrase = Phrase(phrase)
    rows = [table.index[t] for t in phrase.tokens if t in table.index]
    if not rows:
        raise VocabularyError(f"no token of {phrase.raw!r} is in the vocabulary")
    if len(rows) == 1:
        return table.vectors[rows[0]].copy()
    return table.vectors[rows].mean(axis=0)


def head_noun(phrase: Phrase, noun_lexicon: set[str] | frozenset[str]) -> tuple[int, str]:
    """Position and text of the rightmost lexicon noun (last token if none)."""
    for pos in range(len(phrase.tokens) - 1, -1, -1):
        if phrase.tokens[pos] in noun_lexicon:
            return pos, phrase.tokens[pos]
    return len(phrase.tokens) - 1, phrase.tokens[-1]


def substitute_head_noun(phrase: Phrase, noun_lexicon, replacement: str) -> tuple[Phrase, str]:
    """Swap the head noun for ``replacement``.

    Returns the rewritten phrase and the head noun that was replaced, e.g.
    ``a running man`` -> ``a running woman``.
    """
    pos, noun = head_noun(phrase, noun_lexicon)
    tokens = list(phrase.tokens)
    tokens[pos] = replacement
    return Phrase.from_tokens(tokens), noun
