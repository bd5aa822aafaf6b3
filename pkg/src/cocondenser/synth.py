"""Synthetic topic corpus with queries and relevance judgments.

Each topic owns a disjoint keyword set. A topic may be divided into facets,
each owning its own keywords on top of the topic's shared ones; a query is a
keyword sample from one facet and its relevant documents are that facet's
documents (with one facet, simply the topic's documents).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .streams import stream

_ONSETS = "b c d f g h j k l m n p r s t v z".split()
_NUCLEI = "a e i o u".split()


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    syllables = [o + n for o, n in itertools.product(_ONSETS, _NUCLEI)]
    words: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        w = "".join(rng.choice(syllables, size=int(rng.integers(2, 4))))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticData:
    corpus: list[tuple[str, str]]
    queries: list[tuple[str, str]]
    qrels: dict[str, set[str]]
    train_queries: list[tuple[str, str]] = field(default_factory=list)
    train_qrels: dict[str, set[str]] = field(default_factory=dict)
    heldout: list[tuple[str, str]] = field(default_factory=list)
    topic_keywords: list[list[str]] = field(default_factory=list)
    doc_group: dict[str, int] = field(default_factory=dict)


def make_synthetic_corpus(n_topics: int = 20, docs_per_topic: int = 10, seed: int = 0, *,
                          n_queries: int = 40, n_train_queries: int = 0, n_heldout: int = 0,
                          facets: int = 1, shared_keywords: int = 6, facet_keywords: int = 8,
                          n_filler: int = 60, doc_len: tuple[int, int] = (40, 60),
                          topic_rate: float = 0.4, query_len: tuple[int, int] = (2, 4)) -> SyntheticData:
    """Generate the corpus together with its queries and held-out documents.

    Documents are spread evenly over the facets of their topic; held-out
    documents come from the same generative model but are not in the corpus.
    """
    if n_topics < 1 or docs_per_topic < 1 or facets < 1:
        raise ValueError("sizes must be >= 1")
    if docs_per_topic < facets:
        raise ValueError("every facet needs at least one document")
    rng = stream(seed, "synth", "words")
    n_groups = n_topics * facets
    words = _pseudo_words(n_filler + n_topics * shared_keywords + n_groups * facet_keywords, rng)
    filler, rest = words[:n_filler], words[n_filler:]
    shared = [rest[t * shared_keywords:(t + 1) * shared_keywords] for t in range(n_topics)]
    rest = rest[n_topics * shared_keywords:]
    facet_kw = [rest[g * facet_keywords:(g + 1) * facet_keywords] for g in range(n_groups)]
    # group g = topic * facets + facet
    group_kw = [shared[g // facets] + facet_kw[g] for g in range(n_groups)]
    topic_kw = [sum((facet_kw[t * facets + f] for f in range(facets)), list(shared[t])) for t in range(n_topics)]

    def document(g: int, r: np.random.Generator) -> str:
        length = int(r.integers(doc_len[0], doc_len[1] + 1))
        topical = r.random(length) < topic_rate
        kw = r.choice(group_kw[g], size=length)
        fill = r.choice(filler, size=length)
        return " ".join(np.where(topical, kw, fill))

    def query(g: int, r: np.random.Generator) -> str:
        size = int(r.integers(query_len[0], query_len[1] + 1))
        words = list(r.choice(facet_kw[g] if facets > 1 else group_kw[g], size=size, replace=False))
        if facets > 1:
            words.append(r.choice(shared[g // facets]))
        words.append(r.choice(filler))
        return " ".join(r.permutation(words))

    corpus, doc_group = [], {}
    members: dict[int, set[str]] = {g: set() for g in range(n_groups)}
    r = stream(seed, "synth", "docs")
    for t in range(n_topics):
        for k in range(docs_per_topic):
            g = t * facets + k % facets
            did = f"d{len(corpus):04d}"
            corpus.append((did, document(g, r)))
            doc_group[did] = g
            members[g].add(did)

    def query_set(prefix: str, count: int, name: str) -> tuple[list, dict]:
        qr = stream(seed, "synth", name)
        qs, rels = [], {}
        for i in range(count):
            g = i % n_groups
            qid = f"{prefix}{i:03d}"
            qs.append((qid, query(g, qr)))
            rels[qid] = set(members[g])
        return qs, rels

    queries, qrels = query_set("q", n_queries, "queries")
    train_queries, train_qrels = query_set("t", n_train_queries, "train")
    hr = stream(seed, "synth", "heldout")
    heldout = [(f"h{i:04d}", document(i % n_groups, hr)) for i in range(n_heldout)]
    return SyntheticData(corpus, queries, qrels, train_queries, train_qrels, heldout, topic_kw, doc_group)
