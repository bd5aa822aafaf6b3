import pytest

from cocondenser.encoder import split_words
from cocondenser.retriever import BM25Index, evaluate
from cocondenser.synth import make_synthetic_corpus


@pytest.mark.parametrize("facets", [1, 2])
def test_structure(facets):
    data = make_synthetic_corpus(20, 10, seed=3, n_train_queries=40, n_heldout=40, facets=facets)
    assert len(data.corpus) == 200 and len(data.queries) == 40 and len(data.heldout) == 40
    assert len({d for d, _ in data.corpus}) == 200
    for qid, _ in data.queries:
        assert len(data.qrels[qid]) == 10 // facets
    for qid, _ in data.train_queries:
        assert data.train_qrels[qid]
    kw = [set(k) for k in data.topic_keywords]
    assert all(not (kw[i] & kw[j]) for i in range(len(kw)) for j in range(i + 1, len(kw)))


def test_documents_use_own_topic_keywords():
    data = make_synthetic_corpus(5, 4, seed=1)
    owner = {w: t for t, words in enumerate(data.topic_keywords) for w in words}
    for did, text in data.corpus:
        topics = {owner[w] for w in split_words(text) if w in owner}
        assert topics == {data.doc_group[did]}


def test_deterministic_and_seed_sensitive():
    a = make_synthetic_corpus(4, 3, seed=5, n_train_queries=4)
    b = make_synthetic_corpus(4, 3, seed=5, n_train_queries=4)
    c = make_synthetic_corpus(4, 3, seed=6, n_train_queries=4)
    assert a == b
    assert a.corpus != c.corpus


def test_invalid_sizes():
    with pytest.raises(ValueError):
        make_synthetic_corpus(0, 10)
    with pytest.raises(ValueError):
        make_synthetic_corpus(3, 1, facets=2)


@pytest.mark.parametrize("facets", [1, 2])
def test_bm25_beats_random(facets):
    data = make_synthetic_corpus(20, 10, seed=0, facets=facets)
    index = BM25Index(data.corpus)
    run = {qid: index.topk(text, 100, qid) for qid, text in data.queries}
    recall5 = evaluate(run, data.qrels).values["R@5"]
    assert recall5 > 5 / len(data.corpus)
