"""Span-pair batches and the corpus-aware contrastive objective."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .condenser import CondenserModel, MaskedBatch, apply_masking
from .encoder import TokenSequence, Vocabulary, prepare, split_words
from .tensor import Tensor, cross_entropy, masked_fill

logger = logging.getLogger(__name__)


class IneligibleDocument(ValueError):
    pass


@dataclass
class Document:
    id: str
    text: str
    tokens: list[int]


@dataclass
class Span:
    doc_id: str
    start: int
    end: int
    seq: TokenSequence

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class SpanPairBatch:
    spans: list[Span]
    masked: MaskedBatch

    @property
    def n(self) -> int:
        return len(self.spans) // 2


class CorpusFormatError(ValueError):
    pass


def read_jsonl_corpus(path: str | Path) -> list[tuple[str, str]]:
    """(id, text) rows of a JSON-lines corpus; errors carry line numbers."""
    rows, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, text = str(obj["id"]), str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: bad corpus record ({exc})") from None
            if doc_id in seen:
                raise CorpusFormatError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
            seen.add(doc_id)
            rows.append((doc_id, text))
    return rows


def write_jsonl_corpus(rows: Sequence[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, text in rows:
            fh.write(json.dumps({"id": doc_id, "text": text}) + "\n")


def make_documents(rows: Sequence[tuple[str, str]], vocab: Vocabulary, min_span: int = 0) -> list[Document]:
    """Tokenize rows; documents shorter than ``2 * min_span`` are dropped with a logged count."""
    docs = [Document(i, t, [vocab.id_of(w) for w in split_words(t)]) for i, t in rows]
    kept = [d for d in docs if len(d.tokens) >= 2 * min_span]
    if len(kept) < len(docs):
        logger.info("dropped %d documents shorter than %d tokens", len(docs) - len(kept), 2 * min_span)
    return kept


def sample_span(doc: Document, rng: np.random.Generator, min_len: int, max_len: int,
                seq_len: int = 128) -> Span:
    length = int(rng.integers(min_len, min(max_len, len(doc.tokens)) + 1))
    start = int(rng.integers(0, len(doc.tokens) - length + 1))
    return Span(doc.id, start, start + length, prepare(doc.tokens[start:start + length], seq_len))


def sample_span_pair(doc: Document, rng: np.random.Generator, min_len: int = 10, max_len: int = 64,
                     seq_len: int = 128) -> tuple[Span, Span]:
    """Two independent spans; lengths and starts uniform, overlap allowed."""
    if len(doc.tokens) < 2 * min_len:
        raise IneligibleDocument(f"document {doc.id} has {len(doc.tokens)} tokens, needs {2 * min_len}")
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"bad span bounds [{min_len}, {max_len}]")
    if max_len + 1 > seq_len:
        raise ValueError(f"max span {max_len} plus [CLS] exceeds sequence length {seq_len}")
    return sample_span(doc, rng, min_len, max_len, seq_len), sample_span(doc, rng, min_len, max_len, seq_len)


def build_batch(docs: Sequence[Document], span_rngs: Sequence[np.random.Generator],
                mask_rngs: Sequence[np.random.Generator], vocab_size: int, mask_rate: float,
                min_len: int, max_len: int, seq_len: int = 128) -> SpanPairBatch:
    """Spans ordered [s11, s12, ..., sn1, sn2], each masked with its own stream."""
    if len(docs) < 1:
        raise ValueError("a batch needs at least one document")
    spans: list[Span] = []
    for doc, rng in zip(docs, span_rngs):
        spans.extend(sample_span_pair(doc, rng, min_len, max_len, seq_len))
    masked = apply_masking([s.seq for s in spans], mask_rate, list(mask_rngs), vocab_size)
    return SpanPairBatch(spans, masked)


def mate_index(rows: int) -> np.ndarray:
    return np.arange(rows) ^ 1


def contrastive_loss(h: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and per-span losses over late-CLS rows [h11, h12, ..., hn1, hn2].

    Raw inner products, no temperature; each row's softmax runs over every
    other row, so the mate sits in its own denominator.
    """
    if h.ndim != 2:
        raise ValueError(f"expected a (2n, d) matrix, got {h.shape}")
    rows = h.shape[0]
    if rows < 2 or rows % 2:
        raise ValueError(f"need an even number (>= 2) of span rows, got {rows}")
    # broadcast product + row sum instead of a GEMM: equal rows then give bitwise-equal scores
    scores = (h.reshape(rows, 1, -1) * h.reshape(1, rows, -1)).sum(axis=-1)
    scores = masked_fill(scores, np.eye(rows, dtype=bool), -np.inf)
    per_span = cross_entropy(scores, mate_index(rows))
    return per_span.mean(), per_span


def combined_losses(model: CondenserModel, batch: SpanPairBatch) -> tuple[Tensor, Tensor, Tensor]:
    """(total, per-span MLM, per-span contrastive) from one forward of the corrupted spans."""
    ids, mask, bidx, pidx, targets = batch.masked.arrays()
    trace = model.forward(ids, mask)
    mlm = model.mlm_losses(trace, bidx, pidx, targets)
    _, co = contrastive_loss(trace.h_cls_late)
    total = (mlm + co).mean()
    return total, mlm, co


def combined_loss(model: CondenserModel, batch: SpanPairBatch) -> Tensor:
    return combined_losses(model, batch)[0]
