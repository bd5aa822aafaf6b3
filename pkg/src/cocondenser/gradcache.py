"""Gradient-cached coCondenser steps.

The contrastive loss couples every span in the batch, but only through the
late-CLS vectors. A graph-free pass collects those vectors, a tiny graph over
the (2n, d) matrix yields dL_co/dh for every span, and the encoder gradient is
then accumulated span group by span group by backpropagating the surrogate
<v, h> + L_mlm. The result equals full-batch backprop up to float reassociation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coloss import SpanPairBatch, contrastive_loss
from .condenser import CondenserModel
from .encoder import collate
from .optim import OptimizerState, adamw_step
from .tensor import Tensor, backward, no_grad


class CacheMismatch(ValueError):
    pass


@dataclass
class GradientCache:
    vectors: np.ndarray
    checksum: str = ""

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class PassStats:
    """Counts sequences held in a single forward call (the activation footprint proxy)."""

    peak_rows: int = 0
    calls: int = 0
    graph_nodes: int = 0

    def record(self, rows: int) -> None:
        self.peak_rows = max(self.peak_rows, rows)
        self.calls += 1


@dataclass
class StepResult:
    loss: float
    mlm: float
    co: float
    mlm_per_span: np.ndarray = field(repr=False)
    co_per_span: np.ndarray = field(repr=False)


def sub_batches(total: int, size: int) -> list[range]:
    if size < 1:
        raise ValueError("sub-batch size must be >= 1")
    return [range(lo, min(lo + size, total)) for lo in range(0, total, size)]


def representation_pass(model: CondenserModel, batch: SpanPairBatch, sub_size: int | None = None,
                        stats: PassStats | None = None) -> np.ndarray:
    """Late-CLS matrix of every span, backbone only, without building a graph."""
    seqs = batch.masked.sequences
    sub_size = sub_size or len(seqs)
    out = np.zeros((len(seqs), model.config.hidden))
    with no_grad():
        for sub in sub_batches(len(seqs), sub_size):
            ids, mask = collate(seqs[sub.start:sub.stop])
            if stats is not None:
                stats.record(len(ids))
            late = model.forward_backbone(ids, mask).late
            if stats is not None and late.node is not None:
                stats.graph_nodes += 1
            out[sub.start:sub.stop] = late.data[:, 0, :]
    return out


def compute_cache(h: np.ndarray, checksum: str = "") -> tuple[GradientCache, np.ndarray]:
    """v_ij = d(sum of per-span contrastive losses)/d h_ij, plus those per-span losses."""
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite entries in the representation matrix")
    leaf = Tensor(h.copy(), requires_grad=True)
    _, per_span = contrastive_loss(leaf)
    backward(per_span.sum())
    return GradientCache(leaf.grad, checksum), per_span.data.copy()


def accumulate_subbatch(model: CondenserModel, batch: SpanPairBatch, sub: range, cache: GradientCache,
                        scale: float) -> np.ndarray:
    """Add scale * d(<v_ij, h_ij> + L_mlm_ij)/dTheta for spans in ``sub``; returns their MLM losses."""
    if len(cache) != len(batch.spans):
        raise CacheMismatch(f"cache holds {len(cache)} vectors for {len(batch.spans)} spans")
    if cache.checksum and cache.checksum != batch.masked.checksum():
        raise CacheMismatch("corrupted inputs differ from those of the representation pass")
    part = batch.masked.subset(list(sub))
    ids, mask, bidx, pidx, targets = part.arrays()
    trace = model.forward(ids, mask)
    mlm = model.mlm_losses(trace, bidx, pidx, targets)
    v = Tensor(cache.vectors[sub.start:sub.stop])
    surrogate = ((v * trace.h_cls_late).sum() + mlm.sum()) * scale
    backward(surrogate)
    return mlm.data.copy()


def cached_gradients(model: CondenserModel, batch: SpanPairBatch, sub_size: int,
                     stats: PassStats | None = None) -> StepResult:
    """Populate parameter grads with the gradient of the combined loss (grads are zeroed first)."""
    if sub_size < 1:
        raise ValueError("sub-batch size must be >= 1")
    total = len(batch.spans)
    checksum = batch.masked.checksum()
    h = representation_pass(model, batch, sub_size, stats)
    cache, co = compute_cache(h, checksum)
    model.params.zero_grad()
    scale = 1.0 / total
    mlm = np.zeros(total)
    for sub in sub_batches(total, sub_size):
        if stats is not None:
            stats.record(len(sub))
        mlm[sub.start:sub.stop] = accumulate_subbatch(model, batch, sub, cache, scale)
    return StepResult(float(mlm.mean() + co.mean()), float(mlm.mean()), float(co.mean()), mlm, co)


def cached_step(model: CondenserModel, batch: SpanPairBatch, sub_size: int, optimizer: OptimizerState,
                lr: float | None = None) -> StepResult:
    result = cached_gradients(model, batch, sub_size)
    adamw_step(model.params, optimizer, lr)
    return result
