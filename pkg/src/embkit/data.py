"""Record types passed between pipeline stages, plus JSONL helpers."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    task: str = "retrieval"
    lang: str = "und"


@dataclass(frozen=True)
class TrainingPair:
    query: str
    pos: str
    negs: tuple[str, ...] = ()
    task: str = "retrieval"
    lang: str = "und"
    pos_id: str | None = None

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "pos": self.pos,
            "negs": list(self.negs),
            "task": self.task,
            "lang": self.lang,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingPair":
        # accepts both the mined-pair layout and the synthetic-pair layout
        if "pos" in obj:
            return cls(
                query=obj["query"],
                pos=obj["pos"],
                negs=tuple(obj.get("negs", ())),
                task=obj.get("task", "retrieval"),
                lang=obj.get("lang", "und"),
                pos_id=obj.get("pos_id"),
            )
        return cls(
            query=obj["query"],
            pos=obj["document"],
            task=obj.get("task", "synthetic-retrieval"),
            lang=obj.get("language", "und"),
            pos_id=obj.get("source_doc_id"),
        )

    def doc_id(self) -> str:
        return self.pos_id if self.pos_id is not None else text_id(self.pos)


def text_id(text: str) -> str:
    """Stable id for a document that arrived without one."""
    return "t" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MinedPair:
    query: str
    pos: str
    task: str
    lang: str
    pos_id: str
    neg_ids: list[str] = field(default_factory=list)
    negs: list[str] = field(default_factory=list)
    neg_sims: list[float] = field(default_factory=list)
    padded: list[bool] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"query": self.query, "pos": self.pos, "negs": list(self.negs),
                "task": self.task, "lang": self.lang}

    def to_training_pair(self) -> TrainingPair:
        return TrainingPair(self.query, self.pos, tuple(self.negs), self.task, self.lang, self.pos_id)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    Path(path).write_text(dumps_jsonl(records), encoding="utf-8")


def read_pairs(path: str | Path) -> list[TrainingPair]:
    return [TrainingPair.from_json(obj) for obj in read_jsonl(path)]


def write_pairs(path: str | Path, pairs: Iterable[TrainingPair | MinedPair]) -> None:
    write_jsonl(path, (p.to_json() for p in pairs))


def read_documents(path: str | Path) -> list[Document]:
    return [
        Document(str(o["id"]), o["text"], o.get("task", "retrieval"), o.get("lang", "und"))
        for o in read_jsonl(path)
    ]
