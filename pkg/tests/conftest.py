import math

import numpy as np
import pytest

from cocondenser.coloss import Document, build_batch, combined_loss
from cocondenser.condenser import CondenserConfig, CondenserModel
from cocondenser.tensor import Tensor, no_grad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(ndarray)`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(1e-12, np.abs(a) + np.abs(b))).max())


def op_grad(build, x: np.ndarray, weights: np.ndarray | None = None):
    """Analytic and numeric gradient of sum(weights * build(Tensor)) w.r.t. x."""
    rng = np.random.default_rng(123)
    with no_grad():
        shape = build(Tensor(x)).shape
    w = rng.normal(size=shape) if weights is None else weights
    t = Tensor(x.copy(), requires_grad=True)
    (build(t) * w).sum().backward()

    def f(arr):
        with no_grad():
            return float((build(Tensor(arr)).data * w).sum())

    return t.grad, numeric_grad(f, x)


TOY_VOCAB = 14


@pytest.fixture
def toy_config():
    return CondenserConfig(vocab_size=TOY_VOCAB, n_early=1, n_late=1, n_head=1, hidden=8, heads=2, ffn=16,
                           max_len=16)


@pytest.fixture
def toy_model(toy_config):
    return CondenserModel.init(toy_config, np.random.default_rng(7), std=0.4)


def make_docs(n, length=12, vocab=TOY_VOCAB, seed=0):
    rng = np.random.default_rng(seed)
    return [Document(f"d{i}", "", [int(t) for t in rng.integers(5, vocab, size=length)]) for i in range(n)]


def make_batch(n, vocab=TOY_VOCAB, seed=0, min_len=3, max_len=6, seq_len=16, rate=0.3):
    docs = make_docs(n, vocab=vocab, seed=seed)
    return build_batch(docs, [np.random.default_rng([seed, 1, i]) for i in range(n)],
                       [np.random.default_rng([seed, 2, i]) for i in range(2 * n)], vocab, rate, min_len,
                       max_len, seq_len)


def double_loop_co(h: np.ndarray) -> np.ndarray:
    """Per-span contrastive losses evaluated term by term, no vectorization."""
    rows = h.shape[0]
    out = np.zeros(rows)
    for a in range(rows):
        mate = a + 1 if a % 2 == 0 else a - 1
        denom = 0.0
        for b in range(rows):
            if b != a:
                denom += math.exp(float(np.dot(h[a], h[b])))
        out[a] = -(float(np.dot(h[a], h[mate])) - math.log(denom))
    return out


def naive_grads(model, batch):
    """Full-batch backprop of the combined loss; returns (loss, {path: grad})."""
    model.params.zero_grad()
    loss = combined_loss(model, batch)
    loss.backward()
    return loss.item(), {k: t.grad.copy() for k, t in model.params.items()}


# Hand-worked metric fixture: five judged queries plus one without judgments.
#   q1 first relevant at rank 3            RR 1/3  R@5 1
#   q2 two relevant, ranks 1 and 6         RR 1    R@5 1/2  R@20 1
#   q3 relevant at rank 11                 RR@10 0 R@5 0    R@20 1
#   q4 three relevant in the top 3         RR 1    R@5 1
#   q5 relevant at rank 2                  RR 1/2  R@5 1
METRIC_RUN = {
    "q1": ["x1", "x2", "a", "x3"],
    "q2": ["a", "x1", "x2", "x3", "x4", "b"],
    "q3": [f"x{i}" for i in range(1, 11)] + ["c"],
    "q4": ["e", "d", "f"],
    "q5": ["h", "g"],
    "q6": ["a", "b"],
}
METRIC_QRELS = {"q1": {"a"}, "q2": {"a", "b"}, "q3": {"c"}, "q4": {"d", "e", "f"}, "q5": {"g"}}
METRIC_EXPECTED = {"MRR@10": (1 / 3 + 1 + 0 + 1 + 1 / 2) / 5, "R@5": (1 + 0.5 + 0 + 1 + 1) / 5,
                   "R@20": 1.0, "R@100": 1.0, "R@1000": 1.0}


ACCEPTANCE_LINES: list[str] = []


def report(name: str, passed: bool, detail: str) -> bool:
    """Record one acceptance verdict; printed again in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
