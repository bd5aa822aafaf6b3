"""Two-stage pre-training: Condenser MLM, then coCondenser with gradient caching."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .coloss import Document, build_batch, sample_span, sample_span_pair
from .condenser import CondenserModel, apply_masking, strip_head
from .encoder import Encoder
from .gradcache import cached_step
from .optim import OptimizerState, adamw_step, linear_decay
from .streams import stream
from .tensor import backward

logger = logging.getLogger(__name__)

LOG_HEADER = "step\tlr\tloss\tmlm\tco"


@dataclass
class PretrainConfig:
    stage: int = 1
    docs_per_update: int = 32
    total_steps: int = 1000
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup: int = 0
    sub_batch: int = 8
    seed: int = 0
    min_span: int = 10
    max_span: int = 64
    mask_rate: float = 0.15
    probe_every: int = 0
    save_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.docs_per_update < 1:
            raise ValueError("docs_per_update must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, (self.beta1, self.beta2), self.adam_eps, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> PretrainConfig:
        kw = {}
        for f in fields(cls):
            if f.name in values:
                kw[f.name] = float(values[f.name]) if f.type == "float" else int(values[f.name])
        return cls(**kw)


@dataclass
class StageResult:
    model: CondenserModel
    log: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    probes: list[tuple[int, float]] = field(default_factory=list)
    initial_checksum: str = ""
    backbone: Encoder | None = None


def batch_documents(n_docs: int, step: int, per_update: int, seed: int, stage: int) -> np.ndarray:
    """Indices for ``step``: epoch-wise permutation, no repeats inside an epoch, last partial batch dropped."""
    if per_update > n_docs:
        raise ValueError(f"docs_per_update {per_update} exceeds corpus size {n_docs}")
    per_epoch = n_docs // per_update
    epoch, slot = divmod(step, per_epoch)
    order = stream(seed, "order", stage, epoch).permutation(n_docs)
    return order[slot * per_update:(slot + 1) * per_update]


def _check_vocab(model: CondenserModel, docs: Sequence[Document]) -> None:
    top = max((max(d.tokens) for d in docs if d.tokens), default=0)
    if top >= model.config.vocab_size:
        raise ValueError(f"vocab mismatch: corpus token id {top} >= model vocab {model.config.vocab_size}")


def _eligible(docs: Sequence[Document], min_len: int) -> list[Document]:
    kept = [d for d in docs if len(d.tokens) >= 2 * min_len]
    if not kept:
        raise ValueError("empty corpus (no document long enough for span sampling)")
    if len(kept) < len(docs):
        logger.info("skipping %d documents shorter than %d tokens", len(docs) - len(kept), 2 * min_len)
    return kept


class _Run:
    """Shared bookkeeping for both stages: optimizer, log file, checkpoints."""

    def __init__(self, model: CondenserModel, config: PretrainConfig, out_dir: str | Path | None,
                 resume: bool):
        self.model = model
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else None
        self.opt = config.optimizer()
        self.start = 0
        self.result = StageResult(model, initial_checksum=checkpoint.checksum(model.params))
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            checkpoint.atomic_write(self.out / "pretrain.cfg", checkpoint.dump_config(config.to_dict()).encode())
            if resume and (self.out / "optim.ckpt").exists():
                loaded = CondenserModel.load(self.out / "model.ckpt")
                for k in model.params:
                    model.params[k].data[...] = loaded.params[k].data
                self.opt.load_params(checkpoint.load(self.out / "optim.ckpt"))
                self.start = self.opt.step
                self.result.initial_checksum = checkpoint.checksum(model.params)
            self._log = open(self.out / "train.log", "a" if self.start else "w", encoding="utf-8")
            if not self.start:
                self._log.write(LOG_HEADER + "\n")
        else:
            self._log = None

    def lr(self, step: int) -> float:
        return linear_decay(step, self.config.total_steps, self.config.lr, self.config.warmup)

    def record(self, step: int, lr: float, loss: float, mlm: float, co: float) -> None:
        self.result.log.append((step, lr, loss, mlm, co))
        if self._log is not None:
            self._log.write(f"{step}\t{lr!r}\t{loss!r}\t{mlm!r}\t{co!r}\n")
            self._log.flush()
        if self.out is not None and self.config.save_every and (step + 1) % self.config.save_every == 0:
            self.save()

    def save(self) -> None:
        self.model.save(self.out / "model.ckpt")
        checkpoint.save(self.opt.to_params(), self.out / "optim.ckpt")

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
        if self.out is not None:
            self.save()


def run_stage1(docs: Sequence[Document], config: PretrainConfig, model: CondenserModel,
               out_dir: str | Path | None = None, resume: bool = False) -> StageResult:
    """MLM-only training of the full Condenser on single-span batches."""
    if not docs:
        raise ValueError("empty corpus")
    _check_vocab(model, docs)
    docs = _eligible(docs, config.min_span)
    run = _Run(model, config, out_dir, resume)
    c = config
    vocab = model.config.vocab_size
    try:
        for step in range(run.start, c.total_steps):
            idx = batch_documents(len(docs), step, c.docs_per_update, c.seed, 1)
            seqs = [sample_span(docs[i], stream(c.seed, "span", 1, step, slot), c.min_span, c.max_span,
                                model.config.max_len).seq for slot, i in enumerate(idx)]
            masked = apply_masking(seqs, c.mask_rate, [stream(c.seed, "mask", 1, step, j) for j in range(len(seqs))],
                                   vocab)
            lr = run.lr(step)
            loss = model.mlm_loss(masked)
            model.params.zero_grad()
            backward(loss)
            adamw_step(model.params, run.opt, lr)
            run.record(step, lr, loss.item(), loss.item(), 0.0)
    finally:
        run.close()
    return run.result


def probe_pairs(docs: Sequence[Document], seed: int, min_len: int, max_len: int, seq_len: int) -> list:
    """One fixed clean span pair per document, used by :func:`alignment_gap`."""
    return [sample_span_pair(d, stream(seed, "probe", i), min_len, max_len, seq_len) for i, d in enumerate(docs)]


def alignment_gap(encode, pairs: Sequence) -> float:
    """Mean same-document span inner product minus mean cross-document inner product.

    ``encode`` maps a list of TokenSequence to an (N, d) array of CLS vectors.
    """
    h = encode([s.seq for pair in pairs for s in pair])
    sims = h @ h.T
    n = len(pairs)
    doc = np.repeat(np.arange(n), 2)
    same = (doc[:, None] == doc[None, :]) & ~np.eye(2 * n, dtype=bool)
    cross = doc[:, None] != doc[None, :]
    return float(sims[same].mean() - sims[cross].mean())


def run_stage2(model: CondenserModel, docs: Sequence[Document], config: PretrainConfig,
               out_dir: str | Path | None = None, probe_docs: Sequence[Document] = (),
               resume: bool = False) -> StageResult:
    """coCondenser training with the combined loss through gradient-cached steps.

    The head is kept during training and dropped from the returned backbone.
    """
    if not docs:
        raise ValueError("empty corpus")
    _check_vocab(model, docs)
    docs = _eligible(docs, config.min_span)
    c = config
    seq_len = model.config.max_len
    pairs = probe_pairs(probe_docs, c.seed, c.min_span, c.max_span, seq_len) if probe_docs else []
    run = _Run(model, config, out_dir, resume)
    probe_log = open(run.out / "probe.log", "a" if run.start else "w") if (run.out and pairs) else None

    def probe(step: int) -> None:
        gap = alignment_gap(model.late_cls, pairs)
        run.result.probes.append((step, gap))
        if probe_log is not None:
            probe_log.write(f"{step}\t{gap!r}\n")
            probe_log.flush()

    try:
        if pairs and run.start == 0:
            probe(0)
        for step in range(run.start, c.total_steps):
            idx = batch_documents(len(docs), step, c.docs_per_update, c.seed, 2)
            batch = build_batch([docs[i] for i in idx],
                                [stream(c.seed, "span", 2, step, slot) for slot in range(len(idx))],
                                [stream(c.seed, "mask", 2, step, j) for j in range(2 * len(idx))],
                                model.config.vocab_size, c.mask_rate, c.min_span, c.max_span, seq_len)
            lr = run.lr(step)
            res = cached_step(model, batch, c.sub_batch, run.opt, lr)
            run.record(step, lr, res.loss, res.mlm, res.co)
            if pairs and c.probe_every and (step + 1) % c.probe_every == 0:
                probe(step + 1)
    finally:
        run.close()
        if probe_log is not None:
            probe_log.close()
    run.result.backbone = strip_head(model)
    if run.out is not None:
        run.result.backbone.save(run.out / "backbone.ckpt")
    return run.result


def read_log(path: str | Path) -> list[tuple[int, float, float, float, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            step, lr, loss, mlm, co = line.rstrip("\n").split("\t")
            rows.append((int(step), float(lr), float(loss), float(mlm), float(co)))
    return rows
