"""Bi-encoder fine-tuning, BM25, exact search and IR metrics."""

from .bm25 import BM25Index, bm25_score, bm25_topk
from .index import RankedList, RetrievalIndex, build_index, search, similarity
from .metrics import (
    FormatError,
    MetricReport,
    evaluate,
    mrr_at_k,
    read_qrels,
    read_queries,
    read_run,
    recall_at_k,
    write_qrels,
    write_queries,
    write_run,
)
from .pipeline import PipelineConfig, PipelineResult, bm25_triples, mine_hard_negatives, retrieve, two_round_pipeline
from .train import (
    BiEncoder,
    FinetuneConfig,
    TrainingTriple,
    nll_loss,
    parameter_checksum,
    read_triples,
    train_round,
    write_triples,
)

__all__ = [
    "BM25Index", "BiEncoder", "FinetuneConfig", "FormatError", "MetricReport", "PipelineConfig",
    "PipelineResult", "RankedList", "RetrievalIndex", "TrainingTriple", "bm25_score", "bm25_topk",
    "bm25_triples", "build_index", "evaluate", "mine_hard_negatives", "mrr_at_k", "nll_loss",
    "parameter_checksum", "read_qrels", "read_queries", "read_run", "read_triples", "recall_at_k", "retrieve",
    "search", "similarity", "train_round", "two_round_pipeline", "write_qrels", "write_queries", "write_run",
    "write_triples",
]
