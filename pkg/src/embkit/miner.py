"""Exact cosine search and hard-negative mining.

Search is brute force: one matrix-vector product per query, then a partial
sort.  Ties are broken by ascending doc id so results never depend on input
order or platform sort stability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Document, MinedPair, TrainingPair
from .errors import (
    DegenerateNorm,
    DuplicateId,
    EmptyInput,
    PoolTooSmall,
    PositiveMissingFromIndex,
)
from .model import ModelParams, forward_batch, tokenize

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.05
_EMBED_CHUNK = 1024


@dataclass
class CorpusIndex:
    doc_ids: list[str]
    vectors: np.ndarray  # [M, d_out], unit rows
    task_tags: list[str]
    texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            seen = set()
            dup = next(d for d in self.doc_ids if d in seen or seen.add(d))
            raise DuplicateId(f"duplicate doc id {dup!r}")
        if len(self.doc_ids) != self.vectors.shape[0] or len(self.task_tags) != len(self.doc_ids):
            raise ValueError("doc_ids, vectors and task_tags must be aligned")
        self.row_of = {d: i for i, d in enumerate(self.doc_ids)}
        # id_rank[i] = position of doc_ids[i] in sorted id order
        self.id_rank = np.empty(len(self.doc_ids), dtype=np.int64)
        self.id_rank[np.array(sorted(range(len(self.doc_ids)), key=self.doc_ids.__getitem__),
                              dtype=np.int64)] = np.arange(len(self.doc_ids))
        tags = np.array(self.task_tags, dtype=object)
        self._task_rows = {t: np.flatnonzero(tags == t) for t in set(self.task_tags)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def task_rows(self, task: str | None) -> np.ndarray:
        if task is None:
            return np.arange(len(self.doc_ids))
        return self._task_rows.get(task, np.zeros(0, dtype=np.int64))


def embed_texts(params: ModelParams, texts: Sequence[str], ids: Sequence[str],
                is_query: bool = False) -> np.ndarray:
    """Embed ``texts`` in chunks; embedding errors name the offending id."""
    out = np.zeros((len(texts), params.d_out))
    for start in range(0, len(texts), _EMBED_CHUNK):
        chunk = texts[start : start + _EMBED_CHUNK]
        toks = [tokenize(t, params.tokenizer, is_query) for t in chunk]
        for j, t in enumerate(toks):
            if not t:
                raise EmptyInput(f"{ids[start + j]!r} has no tokens")
        try:
            out[start : start + len(chunk)] = forward_batch(params, toks)[0]
        except DegenerateNorm:
            for j, t in enumerate(toks):
                try:
                    forward_batch(params, [t])
                except DegenerateNorm as exc:
                    raise DegenerateNorm(f"{ids[start + j]!r}: {exc}") from exc
            raise
    return out


def build_index(params: ModelParams, documents: Sequence[Document]) -> CorpusIndex:
    if not documents:
        raise EmptyInput("cannot index an empty document list")
    ids = [d.id for d in documents]
    if len(set(ids)) != len(ids):
        # fail before spending time on embeddings
        CorpusIndex(ids, np.zeros((len(ids), 1)), [d.task for d in documents])
    vectors = embed_texts(params, [d.text for d in documents], ids)
    return CorpusIndex(ids, vectors, [d.task for d in documents], [d.text for d in documents])


def _select(index: CorpusIndex, sims: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    """Rows of the k best candidates, ordered by (-sim, doc id)."""
    if k < rows.size:
        s = sims[rows]
        kth = np.partition(s, s.size - k)[s.size - k]
        rows = rows[s >= kth]
    order = np.lexsort((index.id_rank[rows], -sims[rows]))
    return rows[order][:k]


def top_k(index: CorpusIndex, query_vec: np.ndarray, k: int,
          task_filter: str | None = None) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = index.vectors @ query_vec
    rows = _select(index, sims, index.task_rows(task_filter), k)
    return [(index.doc_ids[i], float(sims[i])) for i in rows]


def rank_all(index: CorpusIndex, query_vec: np.ndarray) -> list[str]:
    sims = index.vectors @ query_vec
    rows = _select(index, sims, np.arange(len(index)), len(index))
    return [index.doc_ids[i] for i in rows]


def _positive_row(index: CorpusIndex, pair: TrainingPair) -> int:
    if pair.pos_id is not None and pair.pos_id in index.row_of:
        return index.row_of[pair.pos_id]
    for row in index.task_rows(pair.task):
        if index.texts and index.texts[row] == pair.pos:
            return int(row)
    raise PositiveMissingFromIndex(
        f"positive for query {pair.query[:60]!r} (id {pair.pos_id!r}) is not in the index"
    )


def mine_hard_negatives(
    pairs: Sequence[TrainingPair],
    params: ModelParams,
    index: CorpusIndex,
    K: int = 7,
    margin_filter: float | None = None,
    seed: int = 0,
    buffer: int | None = None,
) -> list[MinedPair]:
    """Attach the K most similar same-task documents to each pair.

    The gold positive and any byte-identical copy of it are never kept.  With
    ``margin_filter=m``, candidates scoring above ``sim(query, positive) - m``
    are treated as likely false negatives and dropped.  Shortfalls are padded
    with seeded uniform draws from the rest of the task pool; those entries
    carry ``padded=True``.
    """
    buffer = 2 * K if buffer is None else buffer
    rng = np.random.default_rng(seed)
    qvecs = embed_texts(params, [p.query for p in pairs],
                        [f"query {i}" for i in range(len(pairs))], is_query=True)
    mined = []
    for pair, q in zip(pairs, qvecs):
        pos_row = _positive_row(index, pair)
        pool = index.task_rows(pair.task)
        if pool.size < K + 1:
            raise PoolTooSmall(f"task {pair.task!r} has {pool.size} docs, need {K + 1}")
        sims = index.vectors @ q
        sim_pos = sims[pos_row]

        kept: list[int] = []
        margin_dropped: set[int] = set()
        for row in _select(index, sims, pool, K + buffer):
            if row == pos_row or (index.texts and index.texts[row] == pair.pos):
                continue
            if margin_filter is not None and sims[row] > sim_pos - margin_filter:
                margin_dropped.add(int(row))
                continue
            kept.append(int(row))
            if len(kept) == K:
                break
        n_mined = len(kept)

        if n_mined < K:
            excluded = set(kept) | {pos_row}
            eligible = [int(r) for r in pool if r not in excluded
                        and not (index.texts and index.texts[r] == pair.pos)]
            fresh = [r for r in eligible if r not in margin_dropped]
            need = K - n_mined
            if len(fresh) >= need:
                draw = rng.choice(len(fresh), size=need, replace=False)
                kept.extend(fresh[i] for i in draw)
            elif len(eligible) >= need:
                kept.extend(fresh)
                rest = [r for r in eligible if r in margin_dropped]
                draw = rng.choice(len(rest), size=need - len(fresh), replace=False)
                kept.extend(rest[i] for i in draw)
            else:
                raise PoolTooSmall(
                    f"only {len(eligible)} usable negatives for task {pair.task!r}, need {need}"
                )
            log.debug("padded %d negatives for query %r", need, pair.query[:40])

        mined.append(MinedPair(
            query=pair.query,
            pos=pair.pos,
            task=pair.task,
            lang=pair.lang,
            pos_id=index.doc_ids[pos_row],
            neg_ids=[index.doc_ids[r] for r in kept],
            negs=[index.texts[r] for r in kept] if index.texts else [],
            neg_sims=[float(sims[r]) for r in kept],
            padded=[i >= n_mined for i in range(K)],
        ))
    return mined


def random_negatives(
    pairs: Sequence[TrainingPair], pool: Sequence[Document], K: int, seed: int = 0
) -> list[MinedPair]:
    """Uniform same-task negatives without replacement (the vanilla baseline
    in offline form)."""
    rng = np.random.default_rng(seed)
    by_task: dict[str, list[Document]] = {}
    for doc in pool:
        by_task.setdefault(doc.task, []).append(doc)
    out = []
    for pair in pairs:
        task_docs = by_task.get(pair.task, [])
        if pair.pos_id is not None:
            cands = [d for d in task_docs if d.id != pair.pos_id]
        else:
            cands = [d for d in task_docs if d.text != pair.pos]
        if len(cands) < K or len(task_docs) < K + 1:
            raise PoolTooSmall(f"task {pair.task!r} has {len(task_docs)} docs, need {K + 1}")
        picks = [cands[i] for i in rng.choice(len(cands), size=K, replace=False)]
        out.append(MinedPair(
            query=pair.query,
            pos=pair.pos,
            task=pair.task,
            lang=pair.lang,
            pos_id=pair.doc_id(),
            neg_ids=[d.id for d in picks],
            negs=[d.text for d in picks],
            neg_sims=[float("nan")] * K,
            padded=[False] * K,
        ))
    return out


def pool_from_pairs(pairs: Sequence[TrainingPair],
                    extra: Sequence[Document] = ()) -> list[Document]:
    """Document pool made of every distinct positive plus optional extras."""
    docs: dict[str, Document] = {}
    for p in pairs:
        docs.setdefault(p.doc_id(), Document(p.doc_id(), p.pos, p.task, p.lang))
    for d in extra:
        docs.setdefault(d.id, d)
    return list(docs.values())
