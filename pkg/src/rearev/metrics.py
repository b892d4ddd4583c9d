"""Answer-ranking metrics over per-question probability vectors."""

from __future__ import annotations

from typing import Iterable

import numpy as np

F1_RULES = ("cumulative", "pernode")


def ranking(p: np.ndarray, entities: np.ndarray | None = None) -> np.ndarray:
    """Node order by descending probability, ties to the smaller entity id."""
    ids = np.arange(len(p)) if entities is None else np.asarray(entities)
    return np.lexsort((ids, -np.asarray(p)))


def _gold_positions(answers: Iterable[int], entities: np.ndarray | None, n: int) -> set[int]:
    answers = set(int(a) for a in answers)
    if entities is None:
        return {a for a in answers if 0 <= a < n}
    return {i for i, e in enumerate(np.asarray(entities).tolist()) if e in answers}


def hits_at_1(p, answers: Iterable[int], entities: np.ndarray | None = None) -> int:
    """1 when the top-ranked node is a gold answer.

    Without ``entities`` the answers are node positions; with it they are
    entity ids and ``entities[i]`` names node ``i``.
    """
    p = np.asarray(p)
    if p.size == 0:
        return 0
    gold = _gold_positions(answers, entities, len(p))
    return int(int(ranking(p, entities)[0]) in gold)


def predicted_set(p, tau: float = 0.95, rule: str = "cumulative", entities=None) -> list[int]:
    """Node positions predicted as answers.

    ``cumulative``: shortest prefix of the ranking whose mass reaches ``tau``.
    ``pernode``: every node whose own probability reaches ``tau``.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    p = np.asarray(p)
    if p.size == 0:
        return []
    order = ranking(p, entities)
    if rule == "pernode":
        return [int(i) for i in order if p[i] >= tau]
    if rule != "cumulative":
        raise ValueError(f"unknown F1 rule {rule!r}")
    mass = np.cumsum(p[order])
    # tolerance keeps exact-arithmetic ties (e.g. 19 x 0.05) on the short side
    stop = int(np.searchsorted(mass, tau - 1e-9, side="left")) + 1
    return [int(i) for i in order[:min(stop, len(order))]]


def f1_at_threshold(p, answers: Iterable[int], tau: float = 0.95, rule: str = "cumulative",
                    entities: np.ndarray | None = None, num_gold: int | None = None) -> float:
    """F1 of the thresholded prediction set against the gold answers.

    ``num_gold`` overrides the gold-set size, so answers missing from the
    subgraph still count against recall.
    """
    answers = list(answers)
    p = np.asarray(p)
    gold_inside = _gold_positions(answers, entities, len(p))
    n_gold = len(set(answers)) if num_gold is None else num_gold
    pred = predicted_set(p, tau, rule, entities)
    if not pred or n_gold == 0:
        return 0.0
    tp = sum(1 for i in pred if i in gold_inside)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(pred), tp / n_gold
    return 2 * precision * recall / (precision + recall)
