"""Passage chunking and Okapi BM25 ranking over an instance's documents."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyCorpus, EmptyQuery, InvalidChunking

_WORD = re.compile(r"\S+")
_TERM = re.compile(r"[0-9a-z]+")


@dataclass(frozen=True)
class Passage:
    doc_id: str
    passage_id: int
    text: str
    token_count: int
    start_word: int = 0


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


def analyze(text: str) -> list[str]:
    """Case-folded alphanumeric terms."""
    return _TERM.findall(text.lower())


def words(text: str) -> list[str]:
    return _WORD.findall(text)


def chunk_document(text: str, size: int = 256, overlap: int = 32, doc_id: str = "") -> list[Passage]:
    """Windows of ``size`` whitespace words every ``size - overlap`` words.

    Passage text is the original substring, so line breaks inside a window
    survive.
    """
    if size <= 0:
        raise InvalidChunking(f"chunk size must be positive, got {size}")
    if not 0 <= overlap < size:
        raise InvalidChunking(f"overlap must be in [0, {size}), got {overlap}")
    spans = [m.span() for m in _WORD.finditer(text)]
    stride = size - overlap
    passages = []
    for pid, start in enumerate(range(0, len(spans), stride)):
        window = spans[start : start + size]
        passages.append(
            Passage(doc_id, pid, text[window[0][0] : window[-1][1]], len(window), start)
        )
    return passages


def merge_passages(passages: Sequence[Passage]) -> list[str]:
    """Undo the overlap of consecutive passages from one document."""
    out: list[str] = []
    covered = 0
    for p in sorted(passages, key=lambda p: p.start_word):
        ws = words(p.text)
        skip = covered - p.start_word
        out.extend(ws[max(skip, 0) :])
        covered = max(covered, p.start_word + len(ws))
    return out


class Bm25Index:
    """Corpus statistics computed once; ``rank`` is pure."""

    def __init__(self, passages: Sequence[Passage], params: Bm25Params = Bm25Params()):
        if not passages:
            raise EmptyCorpus("BM25 needs at least one passage")
        self.passages = list(passages)
        self.params = params
        self._tf = [Counter(analyze(p.text)) for p in self.passages]
        self._len = [sum(tf.values()) for tf in self._tf]
        self.avgdl = sum(self._len) / len(self._len)
        df: Counter = Counter()
        for tf in self._tf:
            df.update(tf.keys())
        n = len(self.passages)
        self.idf = {t: math.log((n - c + 0.5) / (c + 0.5) + 1.0) for t, c in df.items()}

    def score(self, query_terms: Sequence[str], i: int) -> float:
        k1, b = self.params.k1, self.params.b
        tf, dl = self._tf[i], self._len[i]
        norm = 1.0 - b + b * dl / self.avgdl if self.avgdl > 0 else 1.0
        s = 0.0
        for term in query_terms:
            f = tf.get(term, 0)
            if f:
                s += self.idf[term] * f * (k1 + 1.0) / (f + k1 * norm)
        return s

    def rank(self, query: str, top_k: int) -> list[tuple[Passage, float]]:
        terms = list(dict.fromkeys(analyze(query)))
        if not terms:
            raise EmptyQuery(f"query {query!r} has no indexable terms")
        scores = [self.score(terms, i) for i in range(len(self.passages))]
        order = sorted(range(len(scores)), key=lambda i: -scores[i])
        return [(self.passages[i], scores[i]) for i in order[: max(top_k, 0)]]


def bm25_rank(
    query: str, passages: Sequence[Passage], top_k: int, params: Bm25Params = Bm25Params()
) -> list[tuple[Passage, float]]:
    return Bm25Index(passages, params).rank(query, top_k)
