"""Accuracy metrics and the exhaustive ground-truth search."""

from __future__ import annotations

from typing import Iterable, Sequence

from ..vectors import SparseVector, angular_distance

MISSING_PENALTY = 1.0
EPSILON = 1e-12


def brute_force_knn(dataset: Iterable[SparseVector], q: SparseVector, k: int) -> list[tuple[int, float]]:
    """Exact ``k`` nearest by angular distance, ties by ascending id."""
    scored = [(angular_distance(q, v), v.id) for v in dataset]
    scored.sort()
    return [(id, d) for d, id in scored[:k]]


def error_ratio(found: Sequence[float], truth: Sequence[float], k: int,
                penalty: float = MISSING_PENALTY) -> float:
    """Mean of found/true distance ratios over the first ``k`` ranks.

    Both inputs are distances sorted ascending. Ranks missing from ``found``
    use ``penalty`` as their distance. A zero true distance scores 1 when
    matched exactly and ``1/EPSILON`` otherwise; every term is capped there.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if len(truth) < k:
        raise ValueError(f"truth has {len(truth)} entries, need {k}")
    total = 0.0
    for i in range(k):
        f = found[i] if i < len(found) else penalty
        t = truth[i]
        if t == 0.0:
            term = 1.0 if f == 0.0 else 1.0 / EPSILON
        else:
            term = min(f / t, 1.0 / EPSILON)
        total += term
    return total / k


def candidate_overhead(candidates: int, k: int) -> float | None:
    """``candidates / k``, or ``None`` when there are not more candidates than ``k``."""
    if k < 1:
        raise ValueError("k must be positive")
    return candidates / k if candidates > k else None
