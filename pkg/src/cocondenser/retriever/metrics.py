"""MRR@k / Recall@k and the TSV / TREC file formats they read and write."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from .index import RankedList


class FormatError(ValueError):
    pass


def _ranked_ids(entry) -> list[str]:
    return entry.ids() if isinstance(entry, RankedList) else list(entry)


def _judged(run: Mapping, qrels: Mapping[str, set[str]]) -> list[str]:
    return [q for q in run if qrels.get(q)]


def mrr_at_k(run: Mapping, qrels: Mapping[str, set[str]], k: int) -> float:
    qids = _judged(run, qrels)
    if not qids:
        return 0.0
    total = 0.0
    for q in qids:
        for rank, pid in enumerate(_ranked_ids(run[q])[:k], 1):
            if pid in qrels[q]:
                total += 1.0 / rank
                break
    return total / len(qids)


def recall_at_k(run: Mapping, qrels: Mapping[str, set[str]], k: int) -> float:
    qids = _judged(run, qrels)
    if not qids:
        return 0.0
    total = 0.0
    for q in qids:
        rel = qrels[q]
        total += len(rel.intersection(_ranked_ids(run[q])[:k])) / len(rel)
    return total / len(qids)


@dataclass
class MetricReport:
    values: dict[str, float]
    evaluated: int
    excluded: int

    def table(self) -> str:
        lines = [f"{'metric':<12}value"]
        lines += [f"{name:<12}{value:.6f}" for name, value in self.values.items()]
        lines.append(f"{'queries':<12}{self.evaluated}")
        lines.append(f"{'excluded':<12}{self.excluded}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.values, "evaluated": self.evaluated, "excluded": self.excluded},
                          indent=2, sort_keys=True)


def evaluate(run: Mapping, qrels: Mapping[str, set[str]], recall_ks: Sequence[int] = (5, 20, 100, 1000),
             mrr_k: int = 10) -> MetricReport:
    values = {f"MRR@{mrr_k}": mrr_at_k(run, qrels, mrr_k)}
    for k in recall_ks:
        values[f"R@{k}"] = recall_at_k(run, qrels, k)
    judged = len(_judged(run, qrels))
    return MetricReport(values, judged, len(run) - judged)


# ---------------------------------------------------------------- file formats


def _tsv_rows(path: str | Path, fields: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != fields:
                raise FormatError(f"{path}:{lineno}: expected {fields} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def read_queries(path: str | Path) -> list[tuple[str, str]]:
    return [(qid, text) for _, (qid, text) in _tsv_rows(path, 2)]


def write_queries(queries: Iterable[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text in queries:
            fh.write(f"{qid}\t{text}\n")


def read_qrels(path: str | Path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    for _, (qid, pid) in _tsv_rows(path, 2):
        out.setdefault(qid, set()).add(pid)
    return out


def write_qrels(qrels: Mapping[str, set[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for pid in sorted(qrels[qid]):
                fh.write(f"{qid}\t{pid}\n")


def write_run(run: Mapping[str, RankedList], path: str | Path, tag: str = "dense") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in run:
            for rank, (pid, score) in enumerate(run[qid].hits, 1):
                fh.write(f"{qid} Q0 {pid} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    run: dict[str, RankedList] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6 or parts[1] != "Q0":
                raise FormatError(f"{path}:{lineno}: expected 'qid Q0 pid rank score tag'")
            qid, _, pid, rank, score, _ = parts
            try:
                rank_i, score_f = int(rank), float(score)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad rank or score") from None
            entry = run.setdefault(qid, RankedList(qid))
            if rank_i != len(entry.hits) + 1:
                raise FormatError(f"{path}:{lineno}: rank {rank_i} out of sequence")
            entry.hits.append((pid, score_f))
    return run
