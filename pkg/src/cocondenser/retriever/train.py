"""Bi-encoder fine-tuning with the negative log-likelihood of the positive passage."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..encoder import Encoder, Vocabulary, collate, tokenize
from ..optim import OptimizerState, adamw_step, linear_decay
from ..streams import stream
from ..tensor import ParameterSet, Tensor, backward, cross_entropy
from .metrics import FormatError

logger = logging.getLogger(__name__)


@dataclass
class TrainingTriple:
    qid: str
    pos: str
    negs: list[str]

    def __post_init__(self):
        if self.pos in self.negs:
            raise ValueError(f"query {self.qid}: positive {self.pos} is also listed as a negative")
        if not self.negs:
            raise ValueError(f"query {self.qid}: needs at least one negative")


def read_triples(path: str | Path) -> list[TrainingTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TrainingTriple(str(obj["qid"]), str(obj["pos"]), [str(n) for n in obj["negs"]]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad triple ({exc})") from None
    return out


def write_triples(triples: Sequence[TrainingTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps({"qid": t.qid, "pos": t.pos, "negs": t.negs}) + "\n")


class BiEncoder:
    """Query and passage encoders; similarity is the raw inner product of CLS vectors."""

    def __init__(self, query_encoder: Encoder, passage_encoder: Encoder | None = None):
        self.fq = query_encoder
        self.fp = passage_encoder if passage_encoder is not None else query_encoder
        if self.fq.config.hidden != self.fp.config.hidden or self.fq.config.vocab_size != self.fp.config.vocab_size:
            raise ValueError("query and passage encoders disagree on hidden size or vocabulary")
        self.history: list[float] = []

    @property
    def shared(self) -> bool:
        return self.fq is self.fp

    @classmethod
    def from_backbone(cls, backbone: Encoder, shared: bool = False) -> BiEncoder:
        return cls(backbone.copy()) if shared else cls(backbone.copy(), backbone.copy())

    def parameters(self) -> ParameterSet:
        if self.shared:
            return self.fq.params
        out = ParameterSet()
        for k in self.fq.params:
            out[f"q.{k}"] = self.fq.params[k]
        for k in self.fp.params:
            out[f"p.{k}"] = self.fp.params[k]
        return out

    def encode_queries(self, texts: Sequence[str], vocab: Vocabulary, max_len: int = 32) -> np.ndarray:
        return self.fq.encode([tokenize(t, vocab, min(max_len, self.fq.config.max_len)) for t in texts])

    def encode_passages(self, texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
        return self.fp.encode([tokenize(t, vocab, self.fp.config.max_len) for t in texts])

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.fq.save(directory / "query.ckpt")
        self.fp.save(directory / "passage.ckpt")

    @classmethod
    def load(cls, directory: str | Path) -> BiEncoder:
        directory = Path(directory)
        return cls(Encoder.load(directory / "query.ckpt"), Encoder.load(directory / "passage.ckpt"))


def nll_loss(q: Tensor, passages: Tensor, group: int, in_batch: bool = False) -> Tensor:
    """Mean over queries of -log softmax score of the positive.

    ``passages`` holds ``group`` rows per query, positive first. With
    ``in_batch`` the other queries' passages join every denominator.
    """
    b, d = q.shape
    if group < 1 or passages.shape != (b * group, d):
        raise ValueError(f"expected {b * group} passage rows of dim {d}, got {passages.shape}")
    if group == 1 and not in_batch:
        raise ValueError("empty denominator: no negatives and in-batch negatives disabled")
    if in_batch:
        scores = q @ passages.T
        targets = np.arange(b) * group
    else:
        scores = (passages.reshape(b, group, d) * q.reshape(b, 1, d)).sum(axis=-1)
        targets = np.zeros(b, dtype=np.int64)
    return cross_entropy(scores, targets).mean()


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 3
    negatives_per_query: int = 3
    in_batch: bool = False
    shared: bool = False
    query_max_len: int = 32
    warmup: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> FinetuneConfig:
        kw = {}
        for f in fields(cls):
            if f.name in values:
                raw = values[f.name]
                if f.type == "bool":
                    kw[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                else:
                    kw[f.name] = float(raw) if f.type == "float" else int(raw)
        return cls(**kw)


def _negatives(pool: Sequence[str], m: int, rng: np.random.Generator) -> list[str]:
    if len(pool) >= m:
        return [pool[i] for i in rng.choice(len(pool), size=m, replace=False)]
    return [pool[i] for i in rng.choice(len(pool), size=m, replace=True)]


def train_round(triples: Sequence[TrainingTriple], backbone: Encoder, queries: Mapping[str, str],
                passages: Mapping[str, str], vocab: Vocabulary, config: FinetuneConfig,
                tag: str = "round") -> BiEncoder:
    """Fine-tune fresh copies of ``backbone`` as query and passage encoders."""
    if not triples:
        raise ValueError("no training triples")
    c = config
    model = BiEncoder.from_backbone(backbone, c.shared)
    params = model.parameters()
    opt = OptimizerState(c.lr, weight_decay=c.weight_decay)
    per_epoch = -(-len(triples) // c.batch_size)
    total = per_epoch * c.epochs
    step = 0
    q_seqs = {t.qid: tokenize(queries[t.qid], vocab, min(c.query_max_len, model.fq.config.max_len))
              for t in triples}
    p_len = model.fp.config.max_len
    for epoch in range(c.epochs):
        order = stream(c.seed, "finetune", tag, "epoch", epoch).permutation(len(triples))
        for lo in range(0, len(triples), c.batch_size):
            batch = [triples[i] for i in order[lo:lo + c.batch_size]]
            rng = stream(c.seed, "finetune", tag, "negs", step)
            pids = []
            for t in batch:
                pids.append(t.pos)
                pids.extend(_negatives(t.negs, c.negatives_per_query, rng))
            q_ids, q_mask = collate([q_seqs[t.qid] for t in batch])
            p_ids, p_mask = collate([tokenize(passages[p], vocab, p_len) for p in pids])
            loss = nll_loss(model.fq.cls(q_ids, q_mask), model.fp.cls(p_ids, p_mask),
                            1 + c.negatives_per_query, c.in_batch)
            params.zero_grad()
            backward(loss)
            adamw_step(params, opt, linear_decay(step, total, c.lr, c.warmup))
            model.history.append(loss.item())
            step += 1
    logger.info("%s: %d steps, final loss %.4f", tag, step, model.history[-1])
    return model


def parameter_checksum(model: BiEncoder) -> str:
    return checkpoint.checksum(model.parameters())
