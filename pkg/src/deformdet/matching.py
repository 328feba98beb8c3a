"""Optimal bipartite matching between predictions and ground truths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MatchResult:
    pairs: list  # (query index, ground-truth index), sorted by query
    total_cost: float

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def linear_sum_assignment(cost) -> np.ndarray:
    """Min-cost assignment of every row of an ``[n, m]`` matrix (``n <= m``) to a distinct column.

    Shortest augmenting path with row/column potentials, O(n^2 m).  Returns
    the column assigned to each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more rows ({n}) than columns ({m})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[j] = row (1-based) owning column j; column 0 is virtual
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            assignment[match[j] - 1] = j - 1
    return assignment


def hungarian_match(cost_matrix) -> MatchResult:
    """Match ``G`` ground truths to ``N >= G`` queries given a ``[N, G]`` cost matrix."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    n, g = cost.shape
    if g > n:
        raise ValueError(f"{g} ground truths cannot be matched to {n} queries")
    if g == 0:
        return MatchResult(pairs=[], total_cost=0.0)
    query_of_gt = linear_sum_assignment(cost.T)
    pairs = sorted((int(q), int(t)) for t, q in enumerate(query_of_gt))
    total = float(sum(cost[q, t] for q, t in pairs))
    return MatchResult(pairs=pairs, total_cost=total)
