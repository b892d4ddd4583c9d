"""Question records and dataset directories."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import Vocab
from .kg import KnowledgeGraph, Subgraph, extract_many, load_facts, read_subgraphs

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
DATA_DIR_ENV = "REAREV_DATA_DIR"


class DatasetError(ValueError):
    pass


@dataclass
class QuestionInstance:
    qid: str
    text: str
    seeds: list[int]  # global entity ids
    answers: list[int]  # global entity ids
    token_ids: list[int] = field(default_factory=list)
    subgraph: Subgraph | None = None
    lf: dict | None = None

    def local_answers(self) -> np.ndarray:
        if self.subgraph is None:
            return np.zeros(0, dtype=np.int64)
        return self.subgraph.local_ids(self.answers)


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":"), ensure_ascii=False) + "\n")


def questions_from_records(records: Sequence[dict], kg: KnowledgeGraph) -> list[QuestionInstance]:
    """Resolve entity names; records without gold answers are dropped with a warning."""
    out = []
    for rec in records:
        try:
            seeds = [kg.entity_id(s) for s in rec["seeds"]]
            answers = [kg.entity_id(a) for a in rec["answers"]]
        except KeyError as exc:
            raise DatasetError(f"question {rec.get('qid')}: unknown entity {exc}") from None
        if not answers:
            log.warning("question %s has no gold answers; skipped", rec["qid"])
            continue
        if not seeds:
            raise DatasetError(f"question {rec['qid']} has no seed entities")
        out.append(QuestionInstance(str(rec["qid"]), rec["text"], seeds, answers, lf=rec.get("lf")))
    return out


def attach_tokens(questions: Iterable[QuestionInstance], vocab: Vocab) -> None:
    for q in questions:
        q.token_ids = vocab.encode(q.text)


def attach_subgraphs(questions: Sequence[QuestionInstance], kg: KnowledgeGraph, m: int,
                     alpha: float = 0.15, iters: int = 30) -> None:
    subs = extract_many(kg, [q.seeds for q in questions], m, alpha, iters)
    for q, sub in zip(questions, subs):
        q.subgraph = sub


@dataclass
class DatasetBundle:
    root: Path
    kg: KnowledgeGraph
    vocab: Vocab
    splits: dict[str, list[QuestionInstance]]
    meta: dict = field(default_factory=dict)

    def question(self, qid: str) -> QuestionInstance:
        for qs in self.splits.values():
            for q in qs:
                if q.qid == qid:
                    return q
        raise KeyError(f"unknown question id {qid!r}")


def load_dataset_dir(root: str | Path, splits: Sequence[str] = SPLITS) -> DatasetBundle:
    """Load facts, vocabulary, question splits and cached subgraphs from ``root``."""
    root = Path(root)
    facts = root / "facts.tsv"
    if not facts.exists():
        raise DatasetError(f"{root}: facts.tsv not found")
    kg = load_facts(facts)
    vocab = Vocab.load(root / "vocab.txt")
    cache_path = root / "subgraphs.jsonl"
    cache = read_subgraphs(cache_path, kg.num_relations) if cache_path.exists() else {}
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    loaded = {}
    for name in splits:
        path = root / f"{name}.jsonl"
        if not path.exists():
            continue
        qs = questions_from_records(read_jsonl(path), kg)
        attach_tokens(qs, vocab)
        missing = [q for q in qs if q.qid not in cache]
        for q in qs:
            q.subgraph = cache.get(q.qid)
        if missing:
            attach_subgraphs(missing, kg, int(meta.get("m", 500)), float(meta.get("alpha", 0.15)),
                             int(meta.get("iters", 30)))
        loaded[name] = qs
    return DatasetBundle(root, kg, vocab, loaded, meta)
