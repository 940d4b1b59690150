"""Atom-to-target matching.

Three solvers on an n x n cost matrix (entries may be +inf for forbidden
pairs): exact min-sum (Jonker-Volgenant via scipy), exact min-bottleneck
(threshold bisection over bipartite matchings), and a partial variant that
drops a fixed number of worst pairs by padding with zero-cost dummies.

Matched values are normalized per atom: each of the n sources carries mass
1/n, dropped sources contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


@dataclass
class Assignment:
    sigma: np.ndarray           # sigma[i] = matched target, -1 if dropped
    value: float                # objective, see solver docstrings
    kind: str
    threshold: float = field(default=float("nan"))

    @property
    def pairs(self):
        return [(i, int(j)) for i, j in enumerate(self.sigma) if j >= 0]


def _as_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise ValueError("cost must be a nonempty square matrix")
    if np.isnan(c).any():
        raise ValueError("cost contains NaN")
    return c


def _finite_scale(c: np.ndarray) -> float:
    finite = c[np.isfinite(c)]
    return float(np.abs(finite).sum()) if finite.size else 0.0


def solve_min_sum(cost) -> Assignment:
    """Permutation minimizing the mean matched cost (value = sum / n)."""
    c = _as_cost(cost)
    n = c.shape[0]
    big = 2.0 * _finite_scale(c) + 1.0
    work = np.where(np.isfinite(c), c, big)
    rows, cols = linear_sum_assignment(work)
    if not np.isfinite(c[rows, cols]).all():
        raise ValueError("no feasible assignment: forbidden pair forced")
    sigma = np.empty(n, dtype=np.int64)
    sigma[rows] = cols
    return Assignment(sigma=sigma, value=float(c[rows, cols].sum() / n),
                      kind="min_sum")


def _perfect_matching(allowed: np.ndarray):
    """Column match per row under a boolean mask, or None."""
    n = allowed.shape[0]
    if not allowed.any(axis=1).all() or not allowed.any(axis=0).all():
        return None
    m = maximum_bipartite_matching(csr_matrix(allowed), perm_type="column")
    if (m < 0).any():
        return None
    return m.astype(np.int64)


def solve_bottleneck(cost) -> Assignment:
    """Permutation minimizing the largest matched cost (value = max)."""
    c = _as_cost(cost)
    finite = np.isfinite(c)
    levels = np.unique(c[finite])
    if levels.size == 0:
        raise ValueError("no feasible assignment: all pairs forbidden")
    lo, hi = 0, levels.size - 1
    if _perfect_matching(finite & (c <= levels[hi])) is None:
        raise ValueError("no feasible assignment: forbidden pair forced")
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        m = _perfect_matching(finite & (c <= levels[mid]))
        if m is not None:
            best = (mid, m)
            hi = mid - 1
        else:
            lo = mid + 1
    level, sigma = best
    th = float(levels[level])
    return Assignment(sigma=sigma, value=th, kind="bottleneck", threshold=th)


def solve_partial(cost, drop: int) -> Assignment:
    """Min-sum over exactly n - drop pairs; the rest are dropped free.

    Pads the matrix with `drop` zero-cost dummy rows and columns (dummy to
    dummy forbidden), which forces exactly `drop` real sources and targets
    out of the matching.  value = sum of kept costs / n.
    """
    c = _as_cost(cost)
    n = c.shape[0]
    if drop < 0:
        raise ValueError("drop must be >= 0")
    if drop >= n:
        # nothing is required to move
        return Assignment(sigma=np.full(n, -1, dtype=np.int64), value=0.0,
                          kind="partial")
    big = 2.0 * _finite_scale(c) + 1.0
    m = n + drop
    work = np.full((m, m), big)
    work[:n, :n] = np.where(np.isfinite(c), c, big)
    work[:n, n:] = 0.0
    work[n:, :n] = 0.0
    rows, cols = linear_sum_assignment(work)
    sigma = np.full(n, -1, dtype=np.int64)
    total = 0.0
    kept = 0
    for i, j in zip(rows, cols):
        if i < n and j < n:
            if not np.isfinite(c[i, j]):
                raise ValueError("no feasible assignment: forbidden pair "
                                 "forced even after drops")
            sigma[i] = j
            total += c[i, j]
            kept += 1
    if kept != n - drop:
        raise ValueError("no feasible assignment: forbidden pair forced "
                         "even after drops")
    return Assignment(sigma=sigma, value=float(total / n), kind="partial")


def pair_separation(start_pos, start_time, end_pos, end_time,
                    sigma=None) -> float:
    """Smallest space-time distance between straight transport segments.

    Segment k runs from (start_pos[k], start_time[k]) to
    (end_pos[k], end_time[k]) at constant velocity; only time overlaps are
    compared.  sigma selects/reorders targets (entries < 0 skipped).
    Returns +inf when no two segments share a time window.
    """
    a = np.atleast_2d(np.asarray(start_pos, dtype=np.float64))
    b = np.atleast_2d(np.asarray(end_pos, dtype=np.float64))
    t0 = np.asarray(start_time, dtype=np.float64)
    t1 = np.asarray(end_time, dtype=np.float64)
    if sigma is not None:
        keep = np.asarray([i for i, j in enumerate(sigma) if j >= 0])
        if keep.size == 0:
            return np.inf
        picks = np.asarray([j for j in sigma if j >= 0])
        a, t0 = a[keep], t0[keep]
        b, t1 = b[picks], t1[picks]
    n = a.shape[0]
    if np.any(t1 <= t0):
        raise ValueError("each segment needs end_time > start_time")
    vel = (b - a) / (t1 - t0)[:, None]
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            s = max(t0[i], t0[j])
            e = min(t1[i], t1[j])
            if e < s:
                continue
            pi = a[i] + (s - t0[i]) * vel[i]
            pj = a[j] + (s - t0[j]) * vel[j]
            dp = pi - pj
            dv = vel[i] - vel[j]
            vv = float(dv @ dv)
            tau = 0.0 if vv <= 0.0 else min(max(-float(dp @ dv) / vv, 0.0),
                                            e - s)
            d = np.linalg.norm(dp + tau * dv)
            if d < best:
                best = float(d)
    return best


def verify_non_crossing(start_pos, start_time, end_pos, end_time, sigma=None,
                        tol: float = 1e-9) -> bool:
    return pair_separation(start_pos, start_time, end_pos, end_time,
                           sigma) > tol


def transport_cost_matrix(start_pos, start_time, end_pos, end_time):
    """Space-time distances with departures before arrivals.

    Entry (i, j) is the Euclidean distance between (start_pos[i],
    start_time[i]) and (end_pos[j], end_time[j]) in R^(d+1), or +inf when
    start_time[i] >= end_time[j] (no time to travel).
    """
    a = np.atleast_2d(np.asarray(start_pos, dtype=np.float64))
    b = np.atleast_2d(np.asarray(end_pos, dtype=np.float64))
    s = np.asarray(start_time, dtype=np.float64)
    e = np.asarray(end_time, dtype=np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    dt = s[:, None] - e[None, :]
    cost = np.sqrt(d2 + dt ** 2)
    cost[dt >= 0.0] = np.inf
    return cost
