"""Numerical self-checks shared by the ``gradcheck`` command and the acceptance suite."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .coloss import Document, build_batch, combined_loss, contrastive_loss
from .condenser import CondenserConfig, CondenserModel
from .gradcache import cached_gradients
from .tensor import ParameterSet, Tensor, grad_check


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name:<22} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}"


def _probe(a: Tensor, fault: float) -> Tensor:
    """Identity whose backward is scaled by ``1 + fault``; a negative control for the checker."""
    return T._result(a.data.copy(), "probe", (a,), lambda g: (g * (1.0 + fault),))


def _op_cases(rng: np.random.Generator, fault: float) -> list[tuple[str, np.ndarray, Callable[[Tensor], Tensor]]]:
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.normal(size=(4, 5))
    x3 = rng.normal(size=(2, 3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    mask = rng.random((3, 4)) < 0.3
    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    targets = np.array([1, 0, 3])
    return [
        ("add", x, lambda t: t + Tensor(b[:, 0][:3, None])),
        ("neg", x, lambda t: -t),
        ("mul", x, lambda t: t * t),
        ("exp", x, T.exp),
        ("log", pos, T.log),
        ("gelu", x, T.gelu),
        ("masked_fill", x, lambda t: T.masked_fill(t, mask, 0.25)),
        ("reshape", x, lambda t: t.reshape(4, 3)),
        ("transpose", x3, lambda t: t.transpose(2, 0, 1)),
        ("take", x, lambda t: T.take(t, (np.array([0, 2, 2]), slice(1, 3)))),
        ("concat", x, lambda t: T.concat([t, t * 2.0], axis=1)),
        ("sum", x3, lambda t: T.tsum(t, axis=1)),
        ("mean", x3, lambda t: T.tmean(t, axis=(0, 2))),
        ("matmul", x, lambda t: t @ Tensor(b)),
        ("matmul_batched", x3, lambda t: t @ Tensor(b)),
        ("softmax", x, lambda t: T.softmax(t, axis=-1)),
        ("log_softmax", x, lambda t: T.log_softmax(t, axis=0)),
        ("layer_norm", x, lambda t: T.layer_norm(t, Tensor(gain), Tensor(bias), 1e-5)),
        ("layer_norm_gain", gain, lambda t: T.layer_norm(Tensor(x), t, Tensor(bias), 1e-5)),
        ("embedding", table, lambda t: T.embedding(t, ids)),
        ("cross_entropy", x, lambda t: T.cross_entropy(t, targets)),
        ("probe", x, lambda t: _probe(t, fault)),
    ]


def op_errors(seed: int = 0, fault: float = 0.0) -> dict[str, float]:
    """Per-op max relative error of backward against central differences."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, x, fn in _op_cases(rng, fault):
        with T.no_grad():
            w = rng.normal(size=fn(Tensor(x)).shape)
        params = ParameterSet({"x": Tensor(x.copy(), requires_grad=True)})
        out[name] = grad_check(lambda p: (fn(p["x"]) * w).sum(), params, eps=1e-6)
    return out


def toy_model(vocab: int = 14, hidden: int = 8, seed: int = 7, std: float = 0.4) -> CondenserModel:
    cfg = CondenserConfig(vocab_size=vocab, n_early=1, n_late=1, n_head=1, hidden=hidden, heads=2,
                          ffn=2 * hidden, max_len=16)
    return CondenserModel.init(cfg, np.random.default_rng(seed), std)


def toy_batch(n: int, vocab: int = 14, seed: int = 0, seq_len: int = 16):
    rng = np.random.default_rng([seed, 0])
    docs = [Document(f"d{i}", "", [int(t) for t in rng.integers(5, vocab, size=12)]) for i in range(n)]
    return build_batch(docs, [np.random.default_rng([seed, 1, i]) for i in range(n)],
                       [np.random.default_rng([seed, 2, i]) for i in range(2 * n)], vocab, 0.3, 3, 6, seq_len)


def combined_loss_error(seed: int = 0, fault: float = 0.0) -> float:
    model = toy_model(seed=seed + 7)
    batch = toy_batch(2, seed=seed)
    if fault:
        return grad_check(lambda p: _probe(combined_loss(model, batch), fault), model.params)
    return grad_check(lambda p: combined_loss(model, batch), model.params)


def double_loop_contrastive(h: np.ndarray) -> np.ndarray:
    rows = h.shape[0]
    out = np.zeros(rows)
    for a in range(rows):
        mate = a ^ 1
        denom = sum(math.exp(float(np.dot(h[a], h[b]))) for b in range(rows) if b != a)
        out[a] = math.log(denom) - float(np.dot(h[a], h[mate]))
    return out


def contrastive_error(seed: int = 0, ns: Iterable[int] = range(1, 9), d: int = 8) -> float:
    """Worst deviation from the double loop and from the two closed-form degenerate cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in ns:
        h = rng.normal(size=(2 * n, d))
        worst = max(worst, float(np.abs(contrastive_loss(Tensor(h))[1].data - double_loop_contrastive(h)).max()))
        same = np.tile(rng.normal(size=(1, d)), (2 * n, 1))
        expected = 0.0 if n == 1 else math.log(2 * n - 1)
        # degenerate cases must hold bitwise, not merely within tolerance
        if np.any(contrastive_loss(Tensor(same))[1].data != expected):
            worst = math.inf
    return worst


def _grads(model: CondenserModel) -> dict[str, np.ndarray]:
    return {k: t.grad.copy() for k, t in model.params.items()}


def gradcache_error(grid: Iterable[tuple[int, int]] = ((1, 8), (2, 8), (3, 16)), seed: int = 0) -> float:
    """Max per-entry relative error between cached and naive gradients over (n, d) x sub sizes {1,2,3,2n}."""
    worst = 0.0
    for n, d in grid:
        model = toy_model(vocab=20, hidden=d, seed=seed + 31 * n + d, std=0.3)
        batch = toy_batch(n, vocab=20, seed=seed + n)
        model.params.zero_grad()
        combined_loss(model, batch).backward()
        ref = _grads(model)
        for size in sorted({1, 2, 3, 2 * n}):
            cached_gradients(model, batch, size)
            got = _grads(model)
            for k in ref:
                err = np.abs(got[k] - ref[k]) / np.maximum(1e-12, np.abs(got[k]) + np.abs(ref[k]))
                worst = max(worst, float(err.max()))
    return worst


def run_suites(seed: int = 0, fault: float = 0.0) -> list[SuiteResult]:
    ops = op_errors(seed, fault)
    return [
        SuiteResult("ops", max(ops.values()), 1e-4),
        SuiteResult("condenser_combined", combined_loss_error(seed, fault), 1e-4),
        SuiteResult("contrastive_oracle", contrastive_error(seed), 1e-12),
        SuiteResult("gradcache_equivalence", gradcache_error(seed=seed), 1e-8),
    ]
