"""End-to-end desk experiment on the synthetic topic corpus.

Stage 1 (Condenser MLM) and stage 2 (coCondenser, gradient cache) pre-train a
backbone; two-round fine-tuning then runs twice, from the pre-trained backbone
and from an identically shaped randomly initialized one.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coloss import make_documents
from .condenser import CondenserConfig, CondenserModel
from .encoder import Encoder, Vocabulary
from .pretrain import PretrainConfig, run_stage1, run_stage2
from .retriever.pipeline import PipelineConfig, two_round_pipeline
from .retriever.train import FinetuneConfig
from .streams import stream
from .synth import make_synthetic_corpus

logger = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    seed: int = 0
    n_topics: int = 20
    docs_per_topic: int = 10
    n_queries: int = 40
    n_train_queries: int = 40
    n_heldout: int = 40
    facets: int = 2
    hidden: int = 32
    heads: int = 4
    ffn: int = 128
    n_early: int = 2
    n_late: int = 2
    n_head: int = 2
    max_len: int = 64
    init_std: float = 0.2
    min_span: int = 8
    max_span: int = 20
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    stage1_docs: int = 32
    stage2_docs: int = 16
    sub_batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    probe_every: int = 500
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(lr=3e-4, epochs=3))


@dataclass
class DeskResult:
    seed: int
    probes: list[tuple[int, float]]
    stage1_log: list
    stage2_log: list
    pretrained_recall5: list[float]
    random_recall5: list[float]
    random_baseline: float
    seconds: dict[str, float]

    @property
    def final_gap(self) -> float:
        return self.probes[-1][1]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("stage1_log")
        d.pop("stage2_log")
        return d


def run_desk_experiment(cfg: DeskConfig, out_dir: str | Path | None = None) -> DeskResult:
    out = Path(out_dir) if out_dir is not None else None
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    data = make_synthetic_corpus(cfg.n_topics, cfg.docs_per_topic, cfg.seed, n_queries=cfg.n_queries,
                                 n_train_queries=cfg.n_train_queries, n_heldout=cfg.n_heldout,
                                 facets=cfg.facets)
    vocab = Vocabulary.build(t for _, t in data.corpus)
    docs = make_documents(data.corpus, vocab, cfg.min_span)
    heldout = make_documents(data.heldout, vocab, cfg.min_span)
    mcfg = CondenserConfig(len(vocab), cfg.n_early, cfg.n_late, cfg.n_head, cfg.hidden, cfg.heads, cfg.ffn,
                           cfg.max_len)
    model = CondenserModel.init(mcfg, stream(cfg.seed, "init", "condenser"), cfg.init_std)
    common = dict(lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed, min_span=cfg.min_span,
                  max_span=cfg.max_span, mask_rate=mcfg.mask_rate)
    s1 = run_stage1(docs, PretrainConfig(stage=1, docs_per_update=cfg.stage1_docs,
                                         total_steps=cfg.stage1_steps, **common),
                    model, out / "stage1" if out else None)
    timings["stage1"] = time.perf_counter() - t0
    s2 = run_stage2(model, docs, PretrainConfig(stage=2, docs_per_update=cfg.stage2_docs,
                                                total_steps=cfg.stage2_steps, sub_batch=cfg.sub_batch,
                                                probe_every=cfg.probe_every, **common),
                    out / "stage2" if out else None, probe_docs=heldout)
    timings["stage2"] = time.perf_counter() - t0 - timings["stage1"]

    pcfg = PipelineConfig(finetune=FinetuneConfig(**{**asdict(cfg.finetune), "seed": cfg.seed}))
    args = (data.corpus, data.train_queries, data.train_qrels, data.queries, data.qrels)
    t1 = time.perf_counter()
    pre = two_round_pipeline(*args, s2.backbone, vocab, pcfg, out / "finetune_cocondenser" if out else None)
    random_backbone = Encoder.init(mcfg.encoder_config(), stream(cfg.seed, "init", "random-backbone"),
                                   cfg.init_std)
    rand = two_round_pipeline(*args, random_backbone, vocab, pcfg, out / "finetune_random" if out else None)
    timings["finetune"] = time.perf_counter() - t1
    timings["total"] = time.perf_counter() - t0
    return DeskResult(cfg.seed, s2.probes, s1.log, s2.log,
                      [r.values["R@5"] for r in pre.reports], [r.values["R@5"] for r in rand.reports],
                      5.0 / len(data.corpus), timings)


def seed_average(results: list[DeskResult]) -> dict[str, float]:
    return {
        "gap": float(np.mean([r.final_gap for r in results])),
        "pretrained_recall5": float(np.mean([r.pretrained_recall5[-1] for r in results])),
        "random_recall5": float(np.mean([r.random_recall5[-1] for r in results])),
    }
