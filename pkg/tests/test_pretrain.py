import math

import numpy as np
import pytest

from cocondenser import checkpoint, pretrain
from cocondenser.coloss import Document, build_batch, contrastive_loss
from cocondenser.condenser import CondenserConfig, CondenserModel
from cocondenser.encoder import Encoder
from cocondenser.optim import NonFiniteGradient, OptimizerState, adamw_step, linear_decay
from cocondenser.pretrain import (
    LOG_HEADER,
    PretrainConfig,
    alignment_gap,
    batch_documents,
    probe_pairs,
    read_log,
    run_stage1,
    run_stage2,
)
from cocondenser.tensor import ParameterSet, Tensor

from conftest import make_docs


def _params(*arrays):
    return ParameterSet({f"p{i}": Tensor(np.array(a, dtype=float), requires_grad=True) for i, a in enumerate(arrays)})


def test_adamw_zero_grad_no_decay_is_identity():
    ps = _params([1.0, -2.0], [[3.0]])
    for t in ps.values():
        t.grad = np.zeros(t.shape)
    adamw_step(ps, OptimizerState(lr=0.1, weight_decay=0.0))
    assert ps["p0"].data.tolist() == [1.0, -2.0] and ps["p1"].data.tolist() == [[3.0]]


def test_adamw_first_step_closed_form():
    ps = _params([1.0, 1.0, 1.0])
    g = np.array([0.5, -2.0, 1e-9])
    ps["p0"].grad = g.copy()
    adamw_step(ps, OptimizerState(lr=0.01, eps=1e-8, weight_decay=0.0))
    # bias-corrected moments equal g and g^2 on the first step
    expected = 1.0 - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.abs(ps["p0"].data - expected).max() < 1e-15


def test_adamw_decoupled_decay_shrinks_geometrically():
    ps = _params([2.0, -4.0])
    state = OptimizerState(lr=0.1, weight_decay=0.5)
    for _ in range(5):
        ps["p0"].grad = np.zeros(2)
        adamw_step(ps, state)
    assert np.allclose(ps["p0"].data, np.array([2.0, -4.0]) * 0.95 ** 5, rtol=0, atol=1e-14)


def test_adamw_rejects_nonfinite():
    ps = _params([1.0])
    ps["p0"].grad = np.array([np.inf])
    state = OptimizerState()
    with pytest.raises(NonFiniteGradient, match="p0"):
        adamw_step(ps, state)
    assert state.step == 0 and ps["p0"].data.tolist() == [1.0]


def test_optimizer_state_round_trip(tmp_path):
    ps = _params([1.0, 2.0])
    state = OptimizerState(lr=0.1)
    ps["p0"].grad = np.array([0.3, -0.1])
    adamw_step(ps, state)
    checkpoint.save(state.to_params(), tmp_path / "o.ckpt")
    again = OptimizerState(lr=0.1)
    again.load_params(checkpoint.load(tmp_path / "o.ckpt"))
    assert again.step == 1
    assert again.m["p0"].tobytes() == state.m["p0"].tobytes()
    assert again.v["p0"].tobytes() == state.v["p0"].tobytes()


def test_linear_decay():
    assert linear_decay(0, 100, 1e-4) == 1e-4
    assert linear_decay(100, 100, 1e-4) == 0.0
    assert linear_decay(50, 100, 1e-4) == pytest.approx(5e-5, abs=1e-20)
    assert linear_decay(5, 100, 1.0, warmup=10) == 0.5
    with pytest.raises(ValueError):
        linear_decay(0, 0, 1.0)


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        PretrainConfig(docs_per_update=0)
    with pytest.raises(ValueError):
        PretrainConfig(total_steps=0)
    cfg = PretrainConfig(stage=2, lr=3e-4, sub_batch=4)
    text = checkpoint.dump_config(cfg.to_dict())
    assert PretrainConfig.from_dict(checkpoint.parse_config(text)) == cfg


def test_batch_documents_epoch_without_repeats():
    seen = np.concatenate([batch_documents(10, s, 3, 0, 1) for s in range(3)])
    assert sorted(seen.tolist()) == sorted(set(seen.tolist()))
    assert len(seen) == 9
    assert batch_documents(10, 3, 3, 0, 1).tolist() != batch_documents(10, 0, 3, 0, 1).tolist()
    with pytest.raises(ValueError):
        batch_documents(2, 0, 3, 0, 1)


def _tiny(vocab=20, hidden=16):
    cfg = CondenserConfig(vocab_size=vocab, n_early=1, n_late=1, n_head=1, hidden=hidden, heads=2,
                          ffn=2 * hidden, max_len=16)
    return CondenserModel.init(cfg, np.random.default_rng(0))


def test_stage1_overfits_small_corpus():
    # each document repeats its own token; masked positions must be inferred from context
    docs = [Document(f"d{i}", "", [5 + i] * 24) for i in range(4)]
    res = run_stage1(docs, PretrainConfig(stage=1, docs_per_update=4, total_steps=500, lr=3e-3,
                                          weight_decay=0.0, min_span=8, max_span=12), _tiny())
    assert res.log[-1][2] < 0.1 * math.log(20)


def test_stage1_log_and_checkpoint(tmp_path):
    res = run_stage1(make_docs(6, length=16, vocab=20), PretrainConfig(stage=1, docs_per_update=2, total_steps=5,
                                                                       min_span=4, max_span=8), _tiny(), tmp_path)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 6
    rows = read_log(tmp_path / "train.log")
    assert [r[0] for r in rows] == list(range(5))
    assert rows == res.log
    assert (tmp_path / "pretrain.cfg").exists()
    loaded = CondenserModel.load(tmp_path / "model.ckpt")
    assert checkpoint.checksum(loaded.params) == checkpoint.checksum(res.model.params)


def test_stage1_errors():
    with pytest.raises(ValueError, match="empty"):
        run_stage1([], PretrainConfig(), _tiny())
    with pytest.raises(ValueError, match="vocab"):
        run_stage1(make_docs(4, vocab=40), PretrainConfig(min_span=2, max_span=4, docs_per_update=2), _tiny())


class _Interrupt(Exception):
    pass


def test_stage1_resume_is_bitwise(tmp_path, monkeypatch):
    docs = make_docs(6, length=16, vocab=20)
    cfg = PretrainConfig(stage=1, docs_per_update=2, total_steps=6, min_span=4, max_span=8, lr=1e-3)
    run_stage1(docs, cfg, _tiny(), tmp_path / "full")

    real, calls = pretrain.adamw_step, []

    def flaky(*a, **k):
        calls.append(1)
        if len(calls) == 4:
            raise _Interrupt
        real(*a, **k)

    monkeypatch.setattr(pretrain, "adamw_step", flaky)
    with pytest.raises(_Interrupt):
        run_stage1(docs, cfg, _tiny(), tmp_path / "part")
    monkeypatch.setattr(pretrain, "adamw_step", real)
    assert len(read_log(tmp_path / "part" / "train.log")) == 3
    run_stage1(docs, cfg, _tiny(), tmp_path / "part", resume=True)
    assert (tmp_path / "part" / "train.log").read_bytes() == (tmp_path / "full" / "train.log").read_bytes()
    assert (tmp_path / "part" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()


def _stage2_cfg(**kw):
    base = dict(stage=2, docs_per_update=4, total_steps=4, sub_batch=3, min_span=4, max_span=8, lr=1e-3)
    return PretrainConfig(**{**base, **kw})


def test_stage2_artifacts_and_warm_start(tmp_path):
    model = _tiny()
    before = checkpoint.checksum(model.params)
    docs = make_docs(8, length=16, vocab=20)
    res = run_stage2(model, docs, _stage2_cfg(probe_every=2), tmp_path, probe_docs=make_docs(3, 16, 20, seed=5))
    assert res.initial_checksum == before
    assert [s for s, _ in res.probes] == [0, 2, 4]
    assert len((tmp_path / "probe.log").read_text().splitlines()) == 3
    backbone = Encoder.load(tmp_path / "backbone.ckpt")
    assert not any(k.startswith(("head.", "mlm.")) for k in backbone.params)
    assert all(r[4] > 0 for r in res.log)
    assert all(abs(r[2] - r[3] - r[4]) < 1e-12 for r in res.log)


def test_stage2_vocab_mismatch():
    with pytest.raises(ValueError, match="vocab"):
        run_stage2(_tiny(), make_docs(8, length=16, vocab=30), _stage2_cfg())


def test_two_stage_run_reproducible(tmp_path):
    docs = make_docs(8, length=16, vocab=20)
    sums = []
    for tag in "ab":
        model = _tiny()
        run_stage1(docs, PretrainConfig(stage=1, docs_per_update=4, total_steps=3, min_span=4, max_span=8), model)
        res = run_stage2(model, docs, _stage2_cfg(), tmp_path / tag)
        sums.append((tmp_path / tag / "backbone.ckpt").read_bytes())
    assert sums[0] == sums[1]


def test_alignment_gap_definition():
    pairs = probe_pairs(make_docs(3, 16, 20), 0, 4, 8, 16)
    vecs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    gap = alignment_gap(lambda seqs: vecs[:len(seqs)], pairs)
    same = (1 + 1 + 2) / 3
    cross = (0 + 1 + 1) / 3  # doc pairs (a,b) (a,c) (b,c), each pair of spans contributing equally
    assert gap == pytest.approx(same - cross, abs=1e-12)


def test_stage2_reduces_contrastive_loss_on_probe_batch():
    rng = np.random.default_rng(3)
    # each document draws from its own two tokens, so documents are separable
    docs = [Document(f"d{i}", "", [int(t) for t in 5 + 2 * i + rng.integers(0, 2, 20)]) for i in range(8)]
    model = _tiny(vocab=21)
    probe = build_batch(docs, [np.random.default_rng([9, i]) for i in range(8)],
                        [np.random.default_rng([8, i]) for i in range(16)], 21, 0.15, 4, 8, 16)

    def co():
        ids, mask, *_ = probe.masked.arrays()
        return contrastive_loss(model.forward_backbone(ids, mask).h_cls_late)[0].item()

    start = co()
    assert abs(start - math.log(15)) < 0.05
    run_stage2(model, docs, _stage2_cfg(total_steps=150, docs_per_update=8, sub_batch=16, lr=3e-3))
    assert co() < start - 0.5
