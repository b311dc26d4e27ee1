"""Retrieval evaluation: task bundles, nDCG@k / recall@k, grouped means.

A task bundle is a directory holding ``queries.jsonl`` and ``corpus.jsonl``
(``{"id", "text"}`` per line) and ``qrels.tsv`` (``query_id<TAB>doc_id<TAB>grade``).
An optional ``meta.json`` may set ``name`` and ``language``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import read_jsonl
from .errors import DanglingReference, DuplicateInRanking, EmptyGroup, MissingFile, NonPositiveGrade
from .miner import CorpusIndex, _select, embed_texts
from .model import ModelParams


@dataclass
class RetrievalTask:
    name: str
    language: str
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: dict[str, dict[str, int]]

    def validate(self) -> None:
        for qid, judged in self.qrels.items():
            if qid not in self.queries:
                raise DanglingReference(f"{self.name}: qrels query {qid!r} not in queries", qid)
            for did, grade in judged.items():
                if did not in self.corpus:
                    raise DanglingReference(f"{self.name}: qrels doc {did!r} not in corpus", did)
                if grade < 1:
                    raise NonPositiveGrade(f"{self.name}: grade {grade} for ({qid}, {did})")

    def write(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "queries.jsonl").write_text(
            "".join(json.dumps({"id": k, "text": v}, ensure_ascii=False) + "\n"
                    for k, v in self.queries.items()), encoding="utf-8")
        (d / "corpus.jsonl").write_text(
            "".join(json.dumps({"id": k, "text": v}, ensure_ascii=False) + "\n"
                    for k, v in self.corpus.items()), encoding="utf-8")
        (d / "qrels.tsv").write_text(
            "".join(f"{q}\t{doc}\t{g}\n" for q, judged in self.qrels.items()
                    for doc, g in judged.items()), encoding="utf-8")
        (d / "meta.json").write_text(json.dumps({"name": self.name, "language": self.language}) + "\n")
        return d


def _read_id_text(path: Path) -> dict[str, str]:
    return {str(o["id"]): o["text"] for o in read_jsonl(path)}


def load_task(directory: str | Path) -> RetrievalTask:
    d = Path(directory)
    for fname in ("queries.jsonl", "corpus.jsonl", "qrels.tsv"):
        if not (d / fname).is_file():
            raise MissingFile(f"{d / fname} not found")
    meta = {}
    if (d / "meta.json").is_file():
        meta = json.loads((d / "meta.json").read_text())
    qrels: dict[str, dict[str, int]] = {}
    with open(d / "qrels.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{d / 'qrels.tsv'}:{lineno}: expected 3 tab-separated columns")
            qid, did, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                if lineno == 1:  # header row
                    continue
                raise ValueError(f"{d / 'qrels.tsv'}:{lineno}: grade {grade_s!r} is not an integer")
            if grade < 1:
                raise NonPositiveGrade(f"{d / 'qrels.tsv'}:{lineno}: grade {grade} < 1")
            qrels.setdefault(qid, {})[did] = grade
    task = RetrievalTask(
        name=meta.get("name", d.name),
        language=meta.get("language", "und"),
        queries=_read_id_text(d / "queries.jsonl"),
        corpus=_read_id_text(d / "corpus.jsonl"),
        qrels=qrels,
    )
    task.validate()
    return task


def _check_unique(ranked: Sequence[str]) -> None:
    if len(set(ranked)) != len(ranked):
        seen = set()
        dup = next(d for d in ranked if d in seen or seen.add(d))
        raise DuplicateInRanking(f"doc {dup!r} appears twice in the ranking")


def dcg(gains: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(ranked: Sequence[str], qrels: Mapping[str, int], k: int = 10) -> float:
    """Graded nDCG with ``2^grade - 1`` gains; unjudged docs gain nothing."""
    _check_unique(ranked)
    if not qrels:
        return 0.0
    actual = dcg([qrels.get(d, 0) for d in ranked[:k]])
    ideal = dcg(sorted(qrels.values(), reverse=True)[:k])
    return actual / ideal


def recall_at_k(ranked: Sequence[str], qrels: Mapping[str, int], k: int) -> float:
    if not qrels:
        return 0.0
    return sum(1 for d in ranked[:k] if d in qrels) / len(qrels)


def evaluate_model(params: ModelParams, task: RetrievalTask,
                   k_list: Sequence[int] = (10, 100)) -> dict[str, float]:
    """Mean nDCG@10 and recall@k over every judged query of ``task``."""
    doc_ids = list(task.corpus)
    index = CorpusIndex(doc_ids, embed_texts(params, [task.corpus[d] for d in doc_ids], doc_ids),
                        [task.name] * len(doc_ids))
    qids = sorted(q for q in task.qrels if task.qrels[q])
    qvecs = embed_texts(params, [task.queries[q] for q in qids], qids, is_query=True)
    depth = max([10, *k_list])
    all_rows = np.arange(len(index))
    ndcgs = []
    recalls = {k: [] for k in k_list}
    for qid, qv in zip(qids, qvecs):
        rows = _select(index, index.vectors @ qv, all_rows, depth)
        ranked = [doc_ids[r] for r in rows]
        ndcgs.append(ndcg_at_k(ranked, task.qrels[qid], 10))
        for k in k_list:
            recalls[k].append(recall_at_k(ranked, task.qrels[qid], k))
    n = max(len(qids), 1)
    metrics = {"ndcg@10": math.fsum(ndcgs) / n}
    for k in k_list:
        metrics[f"recall@{k}"] = math.fsum(recalls[k]) / n
    return metrics


@dataclass
class MetricReport:
    per_task: dict[str, dict[str, float]]
    aggregates: dict[str, float] = field(default_factory=dict)
    groups: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"per_task": self.per_task, "aggregates": self.aggregates, "groups": self.groups}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(obj["per_task"], obj.get("aggregates", {}), obj.get("groups", {}))

    def to_markdown(self) -> str:
        metrics = list(next(iter(self.per_task.values())).keys()) if self.per_task else []
        header = "| | " + " | ".join(metrics) + " |"
        rule = "|:---|" + "---:|" * len(metrics)
        lines = [header, rule]

        def row(label, values):
            return f"| {label} | " + " | ".join(f"{100 * v:.2f}" for v in values) + " |"

        for label, members in self.groups.items():
            means = [math.fsum(self.per_task[t][m] for t in members) / len(members) for m in metrics]
            lines.append(row(f"Mean ({label})", means))
        for name, vals in self.per_task.items():
            lines.append(row(f"- {name}", [vals[m] for m in metrics]))
        return "\n".join(lines) + "\n"


def aggregate(per_task: Mapping[str, Mapping[str, float]],
              grouping: Mapping[str, Sequence[str]]) -> MetricReport:
    """Arithmetic mean of per-task nDCG@10 for every group."""
    aggregates = {}
    for label, members in grouping.items():
        if not members:
            raise EmptyGroup(f"group {label!r} has no tasks")
        missing = [m for m in members if m not in per_task]
        if missing:
            raise KeyError(f"group {label!r} references unevaluated tasks {missing}")
        aggregates[label] = math.fsum(per_task[m]["ndcg@10"] for m in members) / len(members)
    return MetricReport({k: dict(v) for k, v in per_task.items()}, aggregates,
                        {k: list(v) for k, v in grouping.items()})


def default_grouping(tasks: Sequence[RetrievalTask]) -> dict[str, list[str]]:
    """``all`` plus one group per task language."""
    groups = {"all": [t.name for t in tasks]}
    for t in tasks:
        groups.setdefault(t.language, []).append(t.name)
    return groups


def evaluate_tasks(params: ModelParams, tasks: Sequence[RetrievalTask],
                   grouping: Mapping[str, Sequence[str]] | None = None) -> MetricReport:
    per_task = {t.name: evaluate_model(params, t) for t in tasks}
    return aggregate(per_task, grouping if grouping is not None else default_grouping(tasks))
