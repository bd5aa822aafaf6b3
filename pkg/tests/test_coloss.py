import json
import math

import numpy as np
import pytest

from cocondenser.coloss import (
    CorpusFormatError,
    Document,
    IneligibleDocument,
    combined_loss,
    combined_losses,
    contrastive_loss,
    make_documents,
    read_jsonl_corpus,
    sample_span_pair,
    write_jsonl_corpus,
)
from cocondenser.encoder import Vocabulary
from cocondenser.tensor import Tensor, grad_check

from conftest import double_loop_co, make_batch, make_docs, op_grad, rel_err


def test_forced_span_placement():
    doc = Document("d", "", list(range(5, 25)))
    seen = set()
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a, b = sample_span_pair(doc, rng, 10, 10, 16)
        assert len(a) == len(b) == 10
        assert a.doc_id == b.doc_id == "d"
        seen.add((a.start, b.start))
    assert (0, 10) in seen and (10, 0) in seen


def test_span_starts_cover_range():
    doc = Document("d", "", list(range(5, 45)))
    rng = np.random.default_rng(1)
    starts, lengths = set(), set()
    for _ in range(10_000):
        for s in sample_span_pair(doc, rng, 4, 8, 16):
            starts.add(s.start)
            lengths.add(len(s))
            assert 0 <= s.start and s.end <= 40
            assert s.seq.ids[1:len(s) + 1] == doc.tokens[s.start:s.end]
    assert starts == set(range(0, 37))
    assert lengths == set(range(4, 9))


def test_ineligible_and_bad_bounds():
    with pytest.raises(IneligibleDocument):
        sample_span_pair(Document("d", "", [5] * 19), np.random.default_rng(0), 10, 12)
    with pytest.raises(ValueError):
        sample_span_pair(Document("d", "", [5] * 40), np.random.default_rng(0), 10, 20, seq_len=20)


def test_batch_layout():
    batch = make_batch(3)
    assert batch.n == 3 and len(batch.spans) == 6
    for i in range(3):
        assert batch.spans[2 * i].doc_id == batch.spans[2 * i + 1].doc_id == f"d{i}"
    assert len(batch.masked.sequences) == 6


def test_contrastive_single_pair_is_zero():
    h = Tensor(np.random.default_rng(0).normal(size=(2, 5)))
    mean, per = contrastive_loss(h)
    assert per.data.tolist() == [0.0, 0.0] and mean.item() == 0.0


@pytest.mark.parametrize("n", [2, 3, 5])
def test_identical_rows_give_log_count(n):
    rows = np.tile(np.random.default_rng(n).normal(size=(1, 4)), (2 * n, 1))
    _, per = contrastive_loss(Tensor(rows))
    assert np.all(per.data == math.log(2 * n - 1))
    _, per0 = contrastive_loss(Tensor(np.zeros((2 * n, 3))))
    assert np.all(per0.data == math.log(2 * n - 1))


def test_double_loop_oracle():
    h = np.random.default_rng(3).normal(size=(6, 7))
    _, per = contrastive_loss(Tensor(h))
    assert np.abs(per.data - double_loop_co(h)).max() < 1e-12


def test_contrastive_errors():
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.zeros((0, 2))))


def test_contrastive_nonnegative_and_permutation_equivariant():
    rng = np.random.default_rng(4)
    for _ in range(20):
        h = rng.normal(size=(8, 4)) * rng.uniform(0.1, 3)
        _, per = contrastive_loss(Tensor(h))
        assert np.all(per.data >= 0)
        perm = rng.permutation(4)
        order = np.stack([2 * perm, 2 * perm + 1], axis=1).reshape(-1)
        _, per2 = contrastive_loss(Tensor(h[order]))
        assert np.abs(per2.data - per.data[order]).max() < 1e-12
        assert abs(per2.data.mean() - per.data.mean()) < 1e-12


def test_orthogonal_identical_mates_drive_loss_to_zero():
    h = np.repeat(np.eye(3) * 10.0, 2, axis=0)
    _, per = contrastive_loss(Tensor(h))
    assert per.data.max() < 1e-40


def test_contrastive_gradient():
    x = np.random.default_rng(5).normal(size=(6, 3))
    a, n = op_grad(lambda t: contrastive_loss(t)[1], x)
    assert rel_err(a, n) < 1e-7


def test_combined_single_pair_is_mean_mlm(toy_model):
    batch = make_batch(1)
    total, mlm, co = combined_losses(toy_model, batch)
    assert co.data.tolist() == [0.0, 0.0]
    assert total.item() == pytest.approx(mlm.data.mean(), abs=1e-15)


def test_combined_recomposes(toy_model):
    batch = make_batch(3)
    total, mlm, co = combined_losses(toy_model, batch)
    assert abs(total.item() - (mlm.data.mean() + co.data.mean())) < 1e-12
    ids, mask, *_ = batch.masked.arrays()
    late = toy_model.forward(ids, mask).h_cls_late.data
    assert np.abs(co.data - double_loop_co(late)).max() < 1e-12


def test_combined_gradient_check(toy_model):
    batch = make_batch(2)
    assert grad_check(lambda p: combined_loss(toy_model, batch), toy_model.params) < 1e-4


def test_corpus_jsonl_round_trip(tmp_path):
    rows = [("a", "Hello world"), ("b", "ünïcode text")]
    write_jsonl_corpus(rows, tmp_path / "c.jsonl")
    assert read_jsonl_corpus(tmp_path / "c.jsonl") == rows


def test_corpus_errors_name_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"id": "a", "text": "x"}) + "\n{oops\n")
    with pytest.raises(CorpusFormatError, match=":2:"):
        read_jsonl_corpus(p)
    p.write_text(json.dumps({"id": "a", "text": "x"}) + "\n" + json.dumps({"id": "a", "text": "y"}) + "\n")
    with pytest.raises(CorpusFormatError, match="duplicate"):
        read_jsonl_corpus(p)


def test_short_documents_dropped(caplog):
    vocab = Vocabulary.build(["a b c d e f"])
    with caplog.at_level("INFO"):
        docs = make_documents([("x", "a b c"), ("y", "a b c d e f")], vocab, 3)
    assert [d.id for d in docs] == ["y"]
    assert "dropped 1" in caplog.text
