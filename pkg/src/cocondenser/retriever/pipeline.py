"""Two-round retriever training: BM25 negatives, then mined hard negatives."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from ..encoder import Encoder, Vocabulary
from .bm25 import BM25Index
from .index import RankedList, RetrievalIndex, build_index
from .metrics import MetricReport, evaluate, write_run
from .train import BiEncoder, FinetuneConfig, TrainingTriple, train_round, write_triples

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    bm25_depth: int = 30
    bm25_pool: int = 10
    mine_depth: int = 30
    mine_per_query: int = 10
    eval_k: int = 1000
    k1: float = 0.9
    b: float = 0.4


@dataclass
class PipelineResult:
    round1: BiEncoder
    round2: BiEncoder
    triples1: list[TrainingTriple]
    triples2: list[TrainingTriple]
    runs: list[dict[str, RankedList]]
    reports: list[MetricReport]


def bm25_triples(queries: Sequence[tuple[str, str]], qrels: Mapping[str, set[str]], bm25: BM25Index,
                 depth: int = 30, pool: int = 10) -> list[TrainingTriple]:
    """One triple per (query, relevant passage); negatives are the top non-relevant BM25 hits."""
    triples = []
    for qid, text in queries:
        rel = qrels.get(qid, set())
        negs = [pid for pid in bm25.topk(text, depth, qid).ids() if pid not in rel][:pool]
        if not negs:
            logger.warning("query %s: BM25 returned no non-relevant passage; skipped", qid)
            continue
        triples.extend(TrainingTriple(qid, pos, list(negs)) for pos in sorted(rel))
    return triples


def retrieve(model: BiEncoder, queries: Sequence[tuple[str, str]], index: RetrievalIndex, vocab: Vocabulary,
             k: int, query_max_len: int = 32) -> dict[str, RankedList]:
    emb = model.encode_queries([t for _, t in queries], vocab, query_max_len)
    return {qid: index.search(e, k, qid) for (qid, _), e in zip(queries, emb)}


def mine_hard_negatives(model: BiEncoder, triples: Sequence[TrainingTriple], queries: Mapping[str, str],
                        index: RetrievalIndex, vocab: Vocabulary, depth: int = 30, per_query: int = 10,
                        qrels: Mapping[str, set[str]] | None = None) -> list[TrainingTriple]:
    """Append up to ``per_query`` retrieved non-positive passages to every negative pool.

    Passages already in a pool are not added twice.
    """
    known: dict[str, set[str]] = {}
    for t in triples:
        known.setdefault(t.qid, set()).add(t.pos)
    for qid, rel in (qrels or {}).items():
        known.setdefault(qid, set()).update(rel)
    qids = sorted(known)
    run = retrieve(model, [(q, queries[q]) for q in qids], index, vocab, depth)
    candidates = {q: [pid for pid in run[q].ids() if pid not in known[q]] for q in qids}
    out = []
    for t in triples:
        fresh = [pid for pid in candidates[t.qid] if pid not in t.negs]
        if not fresh:
            logger.info("query %s: retrieval returned only positives or known negatives", t.qid)
        out.append(TrainingTriple(t.qid, t.pos, t.negs + fresh[:per_query]))
    return out


def _evaluate_round(model: BiEncoder, corpus: Sequence[tuple[str, str]], queries, qrels, vocab: Vocabulary,
                    config: PipelineConfig) -> tuple[RetrievalIndex, dict[str, RankedList], MetricReport]:
    index = build_index(model.fp, corpus, vocab)
    run = retrieve(model, queries, index, vocab, min(config.eval_k, len(corpus)), config.finetune.query_max_len)
    return index, run, evaluate(run, qrels)


def two_round_pipeline(corpus: Sequence[tuple[str, str]], train_queries: Sequence[tuple[str, str]],
                       train_qrels: Mapping[str, set[str]], eval_queries: Sequence[tuple[str, str]],
                       eval_qrels: Mapping[str, set[str]], backbone: Encoder, vocab: Vocabulary,
                       config: PipelineConfig | None = None, out_dir: str | Path | None = None) -> PipelineResult:
    """Round 1 on BM25 negatives, mine with the round-1 retriever, round 2 from the same backbone."""
    config = config or PipelineConfig()
    passages = dict(corpus)
    qtext = dict(train_queries)
    bm25 = BM25Index(corpus, config.k1, config.b)
    triples1 = bm25_triples(train_queries, train_qrels, bm25, config.bm25_depth, config.bm25_pool)
    round1 = train_round(triples1, backbone, qtext, passages, vocab, config.finetune, tag="round1")
    index1, run1, report1 = _evaluate_round(round1, corpus, eval_queries, eval_qrels, vocab, config)
    triples2 = mine_hard_negatives(round1, triples1, qtext, index1, vocab, config.mine_depth,
                                   config.mine_per_query, train_qrels)
    round2 = train_round(triples2, backbone, qtext, passages, vocab, config.finetune, tag="round2")
    _, run2, report2 = _evaluate_round(round2, corpus, eval_queries, eval_qrels, vocab, config)
    result = PipelineResult(round1, round2, triples1, triples2, [run1, run2], [report1, report2])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (run, report, triples) in enumerate(zip(result.runs, result.reports, (triples1, triples2)), 1):
            write_run(run, out / f"round{i}.run", tag=f"round{i}")
            (out / f"round{i}.metrics.json").write_text(report.to_json() + "\n")
            write_triples(triples, out / f"round{i}.triples.jsonl")
        round2.save(out / "retriever")
    return result
