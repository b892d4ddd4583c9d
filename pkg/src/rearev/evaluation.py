"""Dataset evaluation reports and the incomplete-KG / low-data experiment matrix."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, IncompatibleCheckpointError, params_digest
from .data import QuestionInstance, attach_subgraphs
from .kg import KnowledgeGraph, drop_facts
from .metrics import F1_RULES, f1_at_threshold, hits_at_1, ranking
from .training import TrainConfig, params_from_arrays, predict, train

log = logging.getLogger(__name__)

TIE_BREAK = "equal probabilities rank by ascending entity id"
MATRIX_COLUMNS = ["keep_ratio", "train_frac", "T", "K", "L", "hits1", "f1", "seed"]


@dataclass
class QuestionRecord:
    qid: str
    top: list[tuple[int, float]]  # (entity id, probability)
    answers: list[int]
    hits1: int
    f1: float
    in_subgraph: int  # gold answers present in the subgraph


@dataclass
class MetricsReport:
    hits1: float
    f1: float
    records: list[QuestionRecord]
    config: dict = field(default_factory=dict)
    tau: float = 0.95
    f1_rule: str = "cumulative"
    tie_break: str = TIE_BREAK

    def to_dict(self) -> dict:
        return {
            "hits1": self.hits1, "f1": self.f1, "num_questions": len(self.records),
            "tau": self.tau, "f1_rule": self.f1_rule, "tie_break": self.tie_break,
            "config": self.config, "records": [asdict(r) for r in self.records],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path, kg: KnowledgeGraph | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["qid", "hits1", "f1", "in_subgraph", "answers", "top"])
            for r in self.records:
                name = (lambda e: kg.entities[e]) if kg is not None else str
                top = ";".join(f"{name(e)}:{p:.6f}" for e, p in r.top)
                w.writerow([r.qid, r.hits1, f"{r.f1:.6f}", r.in_subgraph, ";".join(name(a) for a in r.answers), top])


def score_question(q: QuestionInstance, p: np.ndarray | None, tau: float = 0.95, rule: str = "cumulative",
                   top_k: int = 5) -> QuestionRecord:
    """Metrics for one question; a missing subgraph scores 0 on both metrics."""
    answers = sorted(set(int(a) for a in q.answers))
    if p is None or q.subgraph is None or q.subgraph.num_nodes == 0:
        return QuestionRecord(q.qid, [], answers, 0, 0.0, 0)
    ents = q.subgraph.entities
    order = ranking(p, ents)[:top_k]
    return QuestionRecord(
        q.qid, [(int(ents[i]), float(p[i])) for i in order], answers,
        hits_at_1(p, answers, ents),
        f1_at_threshold(p, answers, tau, rule, ents, num_gold=len(answers)),
        int(np.isin(ents, answers).sum()),
    )


def evaluate(checkpoint: Checkpoint, questions: Sequence[QuestionInstance], *, vocab_hash: str | None = None,
             relation_hash: str | None = None, tau: float = 0.95, rule: str = "cumulative", top_k: int = 5,
             batch_size: int = 64) -> MetricsReport:
    """Score ``questions`` with the checkpoint's weights in inference mode."""
    if rule not in F1_RULES:
        raise ValueError(f"unknown F1 rule {rule!r}")
    if vocab_hash is not None or relation_hash is not None:
        checkpoint.check_compatible(
            checkpoint.vocab_hash if vocab_hash is None else vocab_hash,
            checkpoint.relation_hash if relation_hash is None else relation_hash,
        )
    config = TrainConfig.from_dict({**checkpoint.config, "allow_any": True})
    before = params_digest(checkpoint.params)
    # the tape never writes into parameter arrays, but hand it copies anyway
    params = params_from_arrays({k: v.copy() for k, v in checkpoint.params.items()})
    probs = predict(params, questions, config.reasoner(), batch_size)
    records = [score_question(q, p, tau, rule, top_k) for q, p in zip(questions, probs)]
    if params_digest(checkpoint.params) != before:
        raise RuntimeError("checkpoint tensors changed during evaluation")
    n = max(len(records), 1)
    return MetricsReport(
        hits1=sum(r.hits1 for r in records) / n, f1=sum(r.f1 for r in records) / n,
        records=records, config=dict(checkpoint.config), tau=tau, f1_rule=rule,
    )


# experiment matrix ----------------------------------------------------------

@dataclass
class MatrixCell:
    keep_ratio: float
    train_frac: float
    config: TrainConfig
    seed: int


@dataclass
class MatrixSetup:
    """Everything a matrix cell needs; questions carry token ids but no subgraphs."""

    kg: KnowledgeGraph
    train: list[QuestionInstance]
    dev: list[QuestionInstance]
    test: list[QuestionInstance]
    vocab_size: int
    vocab_hash: str = ""
    relation_hash: str = ""
    m: int = 200
    alpha: float = 0.15
    iters: int = 30
    tau: float = 0.95
    f1_rule: str = "cumulative"


def subsample(questions: Sequence[QuestionInstance], frac: float, seed: int) -> list[QuestionInstance]:
    """Seeded subset of ``ceil(frac * n)`` questions in original order."""
    if not 0.0 < frac <= 1.0:
        raise ValueError("train fraction must lie in (0, 1]")
    if frac >= 1.0:
        return list(questions)
    n = int(np.ceil(frac * len(questions)))
    keep = np.sort(np.random.default_rng([seed, 7]).choice(len(questions), n, replace=False))
    return [questions[i] for i in keep]


def _fresh(questions: Sequence[QuestionInstance]) -> list[QuestionInstance]:
    return [replace(q, subgraph=None) for q in questions]


def run_cell(setup: MatrixSetup, cell: MatrixCell) -> dict:
    """One seeded fact-drop, subsample, train and test evaluation."""
    kg = setup.kg if cell.keep_ratio >= 1.0 else drop_facts(setup.kg, cell.keep_ratio, cell.seed)
    tr = subsample(_fresh(setup.train), cell.train_frac, cell.seed)
    dev, test = _fresh(setup.dev), _fresh(setup.test)
    attach_subgraphs(tr + dev + test, kg, setup.m, setup.alpha, setup.iters)
    config = replace(cell.config, seed=cell.seed)
    result = train(tr, dev, config, vocab_size=setup.vocab_size, num_relations=kg.num_relations,
                   vocab_hash=setup.vocab_hash, relation_hash=setup.relation_hash)
    report = evaluate(result.checkpoint, test, tau=setup.tau, rule=setup.f1_rule)
    row = {"keep_ratio": cell.keep_ratio, "train_frac": cell.train_frac, "T": config.T, "K": config.K,
           "L": config.L, "hits1": report.hits1, "f1": report.f1, "seed": cell.seed, "mode": config.mode}
    log.info("matrix cell %s", row)
    return row


def _run_cell_star(args):
    return run_cell(*args)


def run_matrix(setup: MatrixSetup, keep_ratios: Sequence[float], train_fracs: Sequence[float],
               configs: Sequence[TrainConfig], seeds: Sequence[int] = (0,), jobs: int = 1) -> list[dict]:
    """Rows in grid order (keep ratio, train fraction, config, seed)."""
    cells = [MatrixCell(k, f, c, s) for k in keep_ratios for f in train_fracs for c in configs for s in seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_star, [(setup, c) for c in cells]))
    return [run_cell(setup, c) for c in cells]


def write_matrix_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "hits1": f"{r['hits1']:.6f}", "f1": f"{r['f1']:.6f}"})


def read_matrix_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    casts = {"keep_ratio": float, "train_frac": float, "T": int, "K": int, "L": int,
             "hits1": float, "f1": float, "seed": int}
    return [{k: casts[k](v) for k, v in r.items()} for r in rows]


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Seed-averaged rows keyed by (mode, T, K, L, keep ratio, train fraction).

    Rows read back from CSV carry no mode and count as breadth-first.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r.get("mode", "bfs"), r["T"], r["K"], r["L"], r["keep_ratio"], r["train_frac"])
        groups.setdefault(key, []).append(r)
    out = []
    for (mode, T, K, L, keep, frac), rs in groups.items():
        out.append({"mode": mode, "T": T, "K": K, "L": L, "keep_ratio": keep, "train_frac": frac,
                    "hits1": float(np.mean([r["hits1"] for r in rs])),
                    "f1": float(np.mean([r["f1"] for r in rs])), "seeds": len(rs)})
    return out


def matrix_markdown(rows: Sequence[dict]) -> str:
    """Seed-averaged table, one line per (config, keep ratio, train fraction)."""
    lines = ["| mode | T | K | L | KG kept | train QA | Hits@1 | F1 | seeds |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in summarize(rows):
        lines.append(f"| {r['mode']} | {r['T']} | {r['K']} | {r['L']} | {r['keep_ratio']:.0%} | {r['train_frac']:.0%} "
                     f"| {100 * r['hits1']:.1f} | {100 * r['f1']:.1f} | {r['seeds']} |")
    return "\n".join(lines) + "\n"


__all__ = [
    "IncompatibleCheckpointError", "MatrixCell", "MatrixSetup", "MetricsReport", "QuestionRecord",
    "evaluate", "matrix_markdown", "read_matrix_csv", "run_cell", "run_matrix", "score_question",
    "subsample", "summarize", "write_matrix_csv",
]
