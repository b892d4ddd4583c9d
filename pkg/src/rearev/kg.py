"""Knowledge-graph storage and question-specific subgraph extraction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class FactParseError(ValueError):
    pass


class UnknownEntityError(KeyError):
    pass


@dataclass
class LoadReport:
    lines: int = 0
    facts: int = 0
    duplicates: int = 0


@dataclass
class KnowledgeGraph:
    entities: list[str]
    relations: list[str]
    facts: np.ndarray  # (F, 3) int64 rows of (subject, relation, object)
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        self.facts = np.asarray(self.facts, dtype=np.int64).reshape(-1, 3)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_facts(self) -> int:
        return len(self.facts)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        entities: dict[str, int] = {}
        relations: dict[str, int] = {}
        seen: set[tuple[int, int, int]] = set()
        rows = []
        report = LoadReport()
        for s, r, o in triples:
            report.lines += 1
            key = (
                entities.setdefault(s, len(entities)),
                relations.setdefault(r, len(relations)),
                entities.setdefault(o, len(entities)),
            )
            if key in seen:
                report.duplicates += 1
                continue
            seen.add(key)
            rows.append(key)
        report.facts = len(rows)
        return cls(list(entities), list(relations), np.array(rows, dtype=np.int64).reshape(-1, 3), report)

    def entity_id(self, name_or_id) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            if not 0 <= name_or_id < self.num_entities:
                raise UnknownEntityError(name_or_id)
            return int(name_or_id)
        try:
            return self.entity_index[name_or_id]
        except KeyError:
            raise UnknownEntityError(name_or_id) from None

    def triples(self) -> list[tuple[str, str, str]]:
        e, r = self.entities, self.relations
        return [(e[s], r[p], e[o]) for s, p, o in self.facts.tolist()]

    def with_facts(self, facts: np.ndarray) -> "KnowledgeGraph":
        """Same vocabularies, different fact list."""
        return KnowledgeGraph(list(self.entities), list(self.relations), facts)


def load_facts(path: str | Path) -> KnowledgeGraph:
    """Read a ``subject<TAB>relation<TAB>object`` file; blank lines are skipped."""

    def rows():
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n").rstrip("\r")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or not all(p.strip() for p in parts):
                    raise FactParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
                yield tuple(p.strip() for p in parts)

    return KnowledgeGraph.from_triples(rows())


def write_facts(kg: KnowledgeGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o in kg.triples():
            fh.write(f"{s}\t{r}\t{o}\n")


def drop_facts(kg: KnowledgeGraph, keep_ratio: float, rng_seed: int) -> KnowledgeGraph:
    """Keep a uniform random ``ceil(keep_ratio * |F|)`` subset of facts (original order)."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    n = kg.num_facts
    keep = math.ceil(keep_ratio * n - 1e-9)
    if keep >= n:
        return kg.with_facts(kg.facts.copy())
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(n, size=keep, replace=False))
    return kg.with_facts(kg.facts[chosen])


# subgraphs ----------------------------------------------------------------

@dataclass
class Subgraph:
    """Question-specific subgraph over local node ids ``0..n-1``.

    ``facts`` keeps the induced KG facts; the edge index adds one inverse edge
    per fact (relation ``r + R``) and one self-link per node (relation ``2R``).
    """

    entities: np.ndarray  # global entity id per local node
    facts: np.ndarray  # (F_q, 3) local (src, rel, dst), base relation ids
    seeds: np.ndarray  # local ids
    num_relations: int  # R, size of the base relation vocabulary
    src: np.ndarray = field(init=False)
    rel: np.ndarray = field(init=False)
    dst: np.ndarray = field(init=False)

    def __post_init__(self):
        self.entities = np.asarray(self.entities, dtype=np.int64)
        self.facts = np.asarray(self.facts, dtype=np.int64).reshape(-1, 3)
        self.seeds = np.asarray(self.seeds, dtype=np.int64)
        n, R = len(self.entities), self.num_relations
        s, r, o = self.facts.T
        loops = np.arange(n, dtype=np.int64)
        self.src = np.concatenate([s, o, loops])
        self.rel = np.concatenate([r, r + R, np.full(n, 2 * R, dtype=np.int64)])
        self.dst = np.concatenate([o, s, loops])

    @property
    def num_nodes(self) -> int:
        return len(self.entities)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def max_in_degree(self) -> int:
        return int(np.bincount(self.dst, minlength=self.num_nodes).max()) if self.num_nodes else 0

    def local_ids(self, global_ids: Iterable[int]) -> np.ndarray:
        pos = {g: i for i, g in enumerate(self.entities.tolist())}
        return np.array([pos[g] for g in global_ids if g in pos], dtype=np.int64)


def augmented_relation_count(num_relations: int) -> int:
    """Relation embeddings needed once inverse and self-link ids are added."""
    return 2 * num_relations + 1


def induced_subgraph(kg: KnowledgeGraph, keep: Sequence[int], seeds: Sequence[int]) -> Subgraph:
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    local = np.full(kg.num_entities, -1, dtype=np.int64)
    local[keep] = np.arange(len(keep))
    s, r, o = kg.facts.T
    inside = (local[s] >= 0) & (local[o] >= 0)
    facts = np.stack([local[s[inside]], r[inside], local[o[inside]]], axis=1)
    return Subgraph(keep, facts, local[np.asarray(seeds, dtype=np.int64)], kg.num_relations)


def _transition(kg: KnowledgeGraph) -> tuple[sp.csr_matrix, np.ndarray]:
    """Column-stochastic walk matrix over the undirected fact multigraph."""
    n = kg.num_entities
    s, _, o = kg.facts.T
    rows = np.concatenate([o, s])
    cols = np.concatenate([s, o])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=0)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    walk = adj @ sp.diags(inv)
    return walk.tocsr(), deg == 0


def personalized_pagerank(
    kg: KnowledgeGraph, seed_sets: Sequence[Sequence[int]], alpha: float = 0.15, iters: int = 30
) -> np.ndarray:
    """PPR scores, one column per seed set, by truncated power iteration.

    Restarts (probability ``alpha``) and walks from dangling nodes return to a
    uniform distribution over the seeds, so every column stays a distribution.
    """
    n = kg.num_entities
    teleport = np.zeros((n, len(seed_sets)))
    for j, seeds in enumerate(seed_sets):
        ids = [kg.entity_id(s) for s in seeds]
        if not ids:
            raise ValueError("seed set must be nonempty")
        teleport[ids, j] += 1.0 / len(ids)
    walk, dangling = _transition(kg)
    scores = teleport.copy()
    for _ in range(iters):
        stuck = scores[dangling].sum(axis=0)
        scores = (1 - alpha) * (walk @ scores + teleport * stuck) + alpha * teleport
    return scores


def top_m(scores: np.ndarray, seeds: Sequence[int], m: int) -> np.ndarray:
    """Seeds plus the best ``m - |seeds|`` others; ties go to the smaller id."""
    seeds = list(dict.fromkeys(int(s) for s in seeds))
    if m < len(seeds):
        raise ValueError(f"budget m={m} smaller than the {len(seeds)} seeds")
    order = np.lexsort((np.arange(len(scores)), -scores))
    is_seed = np.zeros(len(scores), dtype=bool)
    is_seed[seeds] = True
    rest = order[~is_seed[order]][: m - len(seeds)]
    return np.sort(np.concatenate([np.array(seeds, dtype=np.int64), rest]))


def extract_subgraph_ppr(
    kg: KnowledgeGraph, seeds: Sequence, m: int, alpha: float = 0.15, iters: int = 30
) -> Subgraph:
    seeds = [kg.entity_id(s) for s in seeds]
    if not seeds:
        raise ValueError("seed set must be nonempty")
    scores = personalized_pagerank(kg, [seeds], alpha, iters)[:, 0]
    return induced_subgraph(kg, top_m(scores, seeds, m), seeds)


def extract_many(
    kg: KnowledgeGraph, seed_sets: Sequence[Sequence], m: int, alpha: float = 0.15,
    iters: int = 30, chunk: int = 512,
) -> list[Subgraph]:
    """Batched :func:`extract_subgraph_ppr`; identical results, one power iteration per chunk."""
    resolved = [[kg.entity_id(s) for s in seeds] for seeds in seed_sets]
    out = []
    for start in range(0, len(resolved), chunk):
        part = resolved[start:start + chunk]
        scores = personalized_pagerank(kg, part, alpha, iters)
        for j, seeds in enumerate(part):
            out.append(induced_subgraph(kg, top_m(scores[:, j], seeds, m), seeds))
    return out


def coverage(answer_sets: Sequence[Iterable[int]], subgraphs: Sequence[Subgraph]) -> float:
    """Fraction of questions with at least one gold answer inside their subgraph."""
    if len(answer_sets) != len(subgraphs):
        raise ValueError("answer sets and subgraphs are not aligned")
    if not subgraphs:
        return 0.0
    hit = 0
    for answers, sub in zip(answer_sets, subgraphs):
        members = set(sub.entities.tolist())
        hit += any(a in members for a in answers)
    return hit / len(subgraphs)


def write_subgraphs(path: str | Path, records: Iterable[tuple[str, Subgraph]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, sub in records:
            rec = {
                "qid": qid,
                "entities": sub.entities.tolist(),
                "edges": sub.facts.tolist(),
                "seeds": sub.seeds.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_subgraphs(path: str | Path, num_relations: int) -> dict[str, Subgraph]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["qid"]] = Subgraph(rec["entities"], rec["edges"], rec["seeds"], num_relations)
    return out
