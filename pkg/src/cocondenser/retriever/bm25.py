"""Okapi BM25 over an inverted index."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence

from ..encoder import split_words
from .index import RankedList


class BM25Index:
    def __init__(self, docs: Sequence[tuple[str, str]], k1: float = 0.9, b: float = 0.4):
        if not docs:
            raise ValueError("cannot index an empty corpus")
        self.k1, self.b = k1, b
        self.ids = [d for d, _ in docs]
        self.lengths: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for row, (_, text) in enumerate(docs):
            tf = Counter(split_words(text))
            self.lengths.append(sum(tf.values()))
            for term, n in tf.items():
                self.postings.setdefault(term, []).append((row, n))
        # postings are appended in row order, hence already sorted by document
        self.avg_len = max(sum(self.lengths) / len(self.lengths), 1e-9)

    def __len__(self) -> int:
        return len(self.ids)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = len(self.ids)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def _term_weight(self, tf: int, length: int) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * length / self.avg_len)
        return tf * (self.k1 + 1.0) / (tf + norm)

    def scores(self, query: str) -> dict[int, float]:
        """Score of every row that shares at least one term with ``query``."""
        out: dict[int, float] = {}
        for term in split_words(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            w = self.idf(term)
            for row, tf in plist:
                out[row] = out.get(row, 0.0) + w * self._term_weight(tf, self.lengths[row])
        return out

    def score(self, query: str, doc_id: str) -> float:
        return self.scores(query).get(self.ids.index(doc_id), 0.0)

    def topk(self, query: str, k: int, qid: str = "") -> RankedList:
        scored = self.scores(query)
        order = sorted(scored, key=lambda r: (-scored[r], self.ids[r]))[:k]
        return RankedList(qid, [(self.ids[r], scored[r]) for r in order])


def bm25_score(query: str, doc_id: str, index: BM25Index) -> float:
    return index.score(query, doc_id)


def bm25_topk(query: str, index: BM25Index, k: int, qid: str = "") -> RankedList:
    return index.topk(query, k, qid)
