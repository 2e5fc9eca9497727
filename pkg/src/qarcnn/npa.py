"""Negative phrase augmentation.

Hard negative categories for a query are mined by scoring a labeled pool of
objects with the query's generated classifier, dropping labels that are not
mutually exclusive of the query, and weighting the survivors by rank. The
resulting confusion table is sampled to append negative phrases to a
minibatch; each appended row is negative only where its source phrase is
positive.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from qarcnn.detector import GeneratorParams
from qarcnn.embedding import Phrase, WordVectorTable, embed_phrase, head_noun, substitute_head_noun
from qarcnn.errors import FormatError

POS, NEG, IGNORE = 1, 0, -1

DEFAULT_CANDIDATES = 500
DEFAULT_COOC_RATIO = 0.01


class Taxonomy:
    """Child -> parent edges with a memoized ancestor closure."""

    def __init__(self, edges: Iterable[tuple[str, str]] = ()):
        self.parents: dict[str, set[str]] = defaultdict(set)
        for child, parent in edges:
            self.parents[child].add(parent)
        self._ancestors: dict[str, frozenset[str]] = {}
        for node in list(self.parents):
            self.ancestors(node)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return sorted((c, p) for c, ps in self.parents.items() for p in ps)

    def ancestors(self, node: str) -> frozenset[str]:
        if node in self._ancestors:
            return self._ancestors[node]
        seen: set[str] = set()
        stack = list(self.parents.get(node, ()))
        on_path = {node}
        # iterative DFS; a cycle shows up as reaching ``node`` again
        while stack:
            cur = stack.pop()
            if cur in on_path:
                raise ValueError(f"taxonomy has a cycle through {node!r}")
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.parents.get(cur, ()))
        result = frozenset(seen)
        self._ancestors[node] = result
        return result

    def related(self, a: str, b: str) -> bool:
        return a in self.ancestors(b) or b in self.ancestors(a)


@dataclass
class CooccurrenceStats:
    total: dict[str, int] = field(default_factory=dict)
    pair: dict[frozenset, int] = field(default_factory=dict)

    def pair_count(self, a: str, b: str) -> int:
        return self.pair.get(frozenset((a, b)), 0)

    def add_pair(self, a: str, b: str, count: int) -> None:
        key = frozenset((a, b))
        self.pair[key] = self.pair.get(key, 0) + int(count)


def is_mutually_exclusive(
    a: str,
    b: str,
    tax: Taxonomy | None = None,
    cooc: CooccurrenceStats | None = None,
    ratio: float = DEFAULT_COOC_RATIO,
) -> bool:
    """Whether no object can carry both labels.

    Either filter may be ``None`` to disable it. The co-occurrence test
    compares the pair count against ``ratio`` of either category's total.
    """
    if a == b:
        return False
    if tax is not None and tax.related(a, b):
        return False
    if cooc is not None:
        n = cooc.pair_count(a, b)
        if n > 0:
            for cat in (a, b):
                if n >= ratio * cooc.total.get(cat, 0):
                    return False
    return True


@dataclass
class LabeledObjects:
    """Pool of category-annotated objects used for candidate mining."""

    features: np.ndarray  # (n, d_feat)
    labels: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if len(self.labels) != len(self.features):
            raise ValueError("labels and features differ in length")

    def __len__(self):
        return len(self.labels)


def mine_candidates(
    params: GeneratorParams,
    words: WordVectorTable,
    valset: LabeledObjects,
    category: str,
    k: int = DEFAULT_CANDIDATES,
) -> list[tuple[str, int]]:
    """Labels of the top-``k`` objects for ``category`` with 1-based ranks."""
    if k <= 0:
        return []
    w_c = params.W @ embed_phrase(words, Phrase(category))
    scores = valset.features @ w_c
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return [(valset.labels[i], rank) for rank, i in enumerate(order, start=1)]


class ConfusionTable(dict):
    """category -> {negative category: probability}."""

    def sample(self, category: str, rng: np.random.Generator, n: int = 1) -> list[str]:
        entry = self[category]
        names = list(entry)
        probs = np.array([entry[x] for x in names])
        picks = rng.choice(len(names), size=n, replace=True, p=probs / probs.sum())
        return [names[i] for i in picks]

    def to_json(self) -> str:
        return json.dumps({c: dict(e) for c, e in sorted(self.items())}, indent=1, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ConfusionTable":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise FormatError(f"{path}: expected a JSON object")
        return cls({c: {n: float(w) for n, w in e.items()} for c, e in raw.items()})


def rank_weights(candidates: Sequence[tuple[str, int]], k: int = DEFAULT_CANDIDATES) -> dict[str, float]:
    """Aggregate ``k - rank`` per label and normalize; zero-weight labels vanish."""
    raw: dict[str, float] = defaultdict(float)
    for label, rank in candidates:
        raw[label] += k - rank
    raw = {label: w for label, w in raw.items() if w > 0}
    total = sum(raw.values())
    return {label: w / total for label, w in sorted(raw.items())}


def build_confusion_table(
    params: GeneratorParams,
    words: WordVectorTable,
    valset: LabeledObjects,
    categories: Iterable[str],
    tax: Taxonomy | None = None,
    cooc: CooccurrenceStats | None = None,
    k: int = DEFAULT_CANDIDATES,
    ratio: float = DEFAULT_COOC_RATIO,
) -> ConfusionTable:
    table = ConfusionTable()
    for cat in categories:
        cands = [
            (label, rank)
            for label, rank in mine_candidates(params, words, valset, cat, k)
            if is_mutually_exclusive(cat, label, tax, cooc, ratio)
        ]
        weights = rank_weights(cands, k)
        if weights:
            table[cat] = weights
    return table


def augment_minibatch(
    phrases: Sequence[Phrase],
    labels: np.ndarray,
    table: ConfusionTable,
    lexicon,
    n_neg: int,
    rng: np.random.Generator,
) -> tuple[list[Phrase], np.ndarray]:
    """Append sampled negative phrases and their masked label rows.

    ``labels`` must contain only the rows of ``phrases``.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != len(phrases):
        raise ValueError("labels must have one row per original phrase")
    out_phrases = list(phrases)
    rows = [labels]
    for phrase, row in zip(phrases, labels):
        _, noun = head_noun(phrase, lexicon)
        if noun not in table:
            continue
        pos = row == POS
        if not pos.any():
            continue
        for neg in table.sample(noun, rng, n_neg):
            new_phrase, _ = substitute_head_noun(phrase, lexicon, neg)
            out_phrases.append(new_phrase)
            rows.append(np.where(pos, NEG, IGNORE).astype(labels.dtype)[None, :])
    return out_phrases, np.concatenate(rows, axis=0)
