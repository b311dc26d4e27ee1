"""Small synthetic corpora with known structure, used by tests and the
experiment scripts.

Words are opaque strings such as ``c03q011`` (cluster 3, query-side word 11);
only their co-occurrence pattern matters to a hashing encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TrainingPair, write_jsonl
from .evaluation import RetrievalTask


@dataclass
class Fixture:
    pairs: list[TrainingPair]
    tasks: list[RetrievalTask]
    sources: dict[str, list[TrainingPair]] = field(default_factory=dict)

    def write(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_pairs_with_ids(d / "train.jsonl", self.pairs)
        for name, pairs in self.sources.items():
            write_pairs_with_ids(d / f"{name}.jsonl", pairs)
        for t in self.tasks:
            t.write(d / "tasks" / t.name)
        return d


def write_pairs_with_ids(path: Path, pairs: list[TrainingPair]) -> None:
    write_jsonl(path, ({"query": p.query, "pos": p.pos, "negs": list(p.negs), "task": p.task,
                        "lang": p.lang, "pos_id": p.doc_id()} for p in pairs))


def _words(rng, vocab: list[str], n: int) -> str:
    return " ".join(rng.choice(vocab, size=n, replace=True))


def separable(seed: int = 0, n_pairs: int = 200, vocab: int = 5, eval_len: int = 4,
              prefix: str = "", lang: str = "xx") -> Fixture:
    """One vocabulary cluster per pair; query-side and document-side words
    never overlap, so an untrained encoder has no lexical signal.

    A training query (document) uses every word of its cluster's query
    (document) vocabulary.  Eval queries and documents are fresh draws of
    ``eval_len`` words from the same vocabularies, one relevant document per
    query.
    """
    rng = np.random.default_rng(seed)
    task = f"{prefix}separable"
    pairs = []
    queries, corpus, qrels = {}, {}, {}
    for c in range(n_pairs):
        qv = [f"{prefix}c{c:03d}q{j}" for j in range(vocab)]
        dv = [f"{prefix}c{c:03d}d{j}" for j in range(vocab)]
        pairs.append(TrainingPair(" ".join(rng.permutation(qv)), " ".join(rng.permutation(dv)),
                                  task=task, lang=lang, pos_id=f"{prefix}train{c:04d}"))
        qid, did = f"{prefix}q{c:04d}", f"{prefix}d{c:04d}"
        queries[qid] = " ".join(rng.choice(qv, size=eval_len, replace=False))
        corpus[did] = " ".join(rng.choice(dv, size=eval_len, replace=False))
        qrels[qid] = {did: 1}
    return Fixture(pairs, [RetrievalTask(f"{task}-eval", lang, queries, corpus, qrels)])


def clustered(seed: int = 0, n_pairs: int = 400, clusters: int = 16, vocab: int = 8,
              query_len: int = 3, doc_len: int = 8, eval_queries: int = 4,
              eval_docs: int = 6, prefix: str = "", lang: str = "xx") -> Fixture:
    """Pairs grouped into clusters with small disjoint query/document
    vocabularies.  Eval relevance is cluster level: every eval document of
    the query's cluster is relevant.  More pairs cover more of each
    vocabulary, with quickly diminishing returns."""
    rng = np.random.default_rng(seed)
    qv = [[f"{prefix}k{c:02d}q{j:03d}" for j in range(vocab)] for c in range(clusters)]
    dv = [[f"{prefix}k{c:02d}d{j:03d}" for j in range(vocab)] for c in range(clusters)]
    task = f"{prefix}clustered"
    pairs = []
    for i in range(n_pairs):
        c = i % clusters
        pairs.append(TrainingPair(_words(rng, qv[c], query_len), _words(rng, dv[c], doc_len),
                                  task=task, lang=lang, pos_id=f"{prefix}train{i:04d}"))
    queries, corpus, qrels = {}, {}, {}
    for c in range(clusters):
        docs = []
        for j in range(eval_docs):
            did = f"{prefix}d{c:02d}{j:03d}"
            corpus[did] = _words(rng, dv[c], doc_len)
            docs.append(did)
        for j in range(eval_queries):
            qid = f"{prefix}q{c:02d}{j:03d}"
            queries[qid] = _words(rng, qv[c], query_len)
            qrels[qid] = {d: 1 for d in docs}
    return Fixture(pairs, [RetrievalTask(f"{task}-eval", lang, queries, corpus, qrels)])


def distractors(seed: int = 0, clusters: int = 40, docs_per_cluster: int = 8,
                eval_docs_per_cluster: int = 5, topic_vocab: int = 12, topic_words: int = 6,
                entity_words: int = 2, query_topic_words: int = 2) -> Fixture:
    """Documents share topic words with their cluster and carry a few unique
    entity words; a query names its document's entities plus some topic
    words.  Same-cluster documents are therefore near-duplicates to an
    untrained encoder, and only the entity words identify the target.

    Eval documents use entity words never seen in training; each query has
    exactly one relevant document.
    """
    rng = np.random.default_rng(seed)
    topics = [[f"t{c:02d}w{j:02d}" for j in range(topic_vocab)] for c in range(clusters)]
    counter = iter(range(10**9))

    def make(c):
        ents = [f"e{next(counter):05d}" for _ in range(entity_words)]
        doc = " ".join(rng.permutation(ents + list(rng.choice(topics[c], topic_words))))
        query = " ".join(rng.permutation(ents + list(rng.choice(topics[c], query_topic_words))))
        return query, doc

    pairs = []
    for c in range(clusters):
        for j in range(docs_per_cluster):
            q, d = make(c)
            pairs.append(TrainingPair(q, d, task="distractor", lang="xx",
                                      pos_id=f"train-c{c:02d}-{j:02d}"))
    queries, corpus, qrels = {}, {}, {}
    for c in range(clusters):
        for j in range(eval_docs_per_cluster):
            q, d = make(c)
            did, qid = f"d-c{c:02d}-{j:02d}", f"q-c{c:02d}-{j:02d}"
            corpus[did], queries[qid], qrels[qid] = d, q, {did: 1}
    return Fixture(pairs, [RetrievalTask("distractor-eval", "xx", queries, corpus, qrels)])


def bilingual(seed: int = 0, n_pairs: int = 120) -> Fixture:
    """Two disjoint "languages" plus a second English-side task family,
    mirroring the synthetic / English-mix / multilingual split of a
    diversity study."""
    en = separable(seed, n_pairs, prefix="en", lang="en")
    fr = separable(seed + 1, n_pairs, prefix="fr", lang="fr")
    mix = separable(seed + 2, n_pairs, prefix="mx", lang="en")
    return Fixture(
        pairs=en.pairs + fr.pairs,
        tasks=en.tasks + fr.tasks + mix.tasks,
        sources={"en-syn": en.pairs, "fr-syn": fr.pairs, "en-mix": mix.pairs},
    )
