"""Exact maximum inner product search over a passage embedding matrix."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..encoder import Encoder, Vocabulary, tokenize
from ..tensor import ParameterSet, Tensor

logger = logging.getLogger(__name__)


@dataclass
class RankedList:
    qid: str
    hits: list[tuple[str, float]] = field(default_factory=list)
    clipped: bool = False

    def ids(self) -> list[str]:
        return [pid for pid, _ in self.hits]


def similarity(q: np.ndarray, p: np.ndarray) -> float:
    q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    return float(q @ p)


class RetrievalIndex:
    def __init__(self, ids: Sequence[str], embeddings: np.ndarray):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids for embedding matrix of shape {embeddings.shape}")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate passage ids")
        if not np.all(np.isfinite(embeddings)):
            raise ValueError("non-finite embeddings")
        self.ids = list(ids)
        self.embeddings = embeddings
        # tie-break rank: lower passage id first
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def search(self, q: np.ndarray, k: int, qid: str = "") -> RankedList:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.embeddings.shape[1],):
            raise ValueError(f"query dimension {q.shape} does not match index dimension {self.embeddings.shape[1]}")
        clipped = k > len(self.ids)
        if clipped:
            logger.warning("k=%d exceeds index size %d; returning all passages", k, len(self.ids))
        scores = self.embeddings @ q
        order = np.lexsort((self._id_rank, -scores))[:k]
        return RankedList(qid, [(self.ids[i], float(scores[i])) for i in order], clipped)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        checkpoint.save(ParameterSet({"embeddings": Tensor(self.embeddings)}), path)
        checkpoint.atomic_write(path.with_suffix(".ids"), "".join(i + "\n" for i in self.ids).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> RetrievalIndex:
        path = Path(path)
        emb = checkpoint.load(path)["embeddings"].data
        ids = path.with_suffix(".ids").read_text(encoding="utf-8").splitlines()
        return cls(ids, emb)


def build_index(encoder: Encoder, corpus: Sequence[tuple[str, str]], vocab: Vocabulary,
                batch_size: int = 64) -> RetrievalIndex:
    if not corpus:
        raise ValueError("empty corpus")
    seqs = [tokenize(text, vocab, encoder.config.max_len) for _, text in corpus]
    return RetrievalIndex([pid for pid, _ in corpus], encoder.encode(seqs, batch_size))


def search(index: RetrievalIndex, q_emb: np.ndarray, k: int, qid: str = "") -> RankedList:
    return index.search(q_emb, k, qid)
