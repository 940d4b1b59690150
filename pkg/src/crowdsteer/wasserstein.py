"""Wasserstein distances between equal-size particle clouds.

1D uses the exact order-statistics coupling for every p (including inf).
In higher dimension the optimal coupling is an assignment problem: min-sum
on p-th powers of distances for finite p, min-bottleneck for p = inf.

Clouds must have the same atom count and uniform weights; mass scales as
W_p(a*mu, a*nu) = a^(1/p) * W_p(mu, nu).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .assignment import solve_bottleneck, solve_min_sum


def _check(a, b):
    if a.dim != b.dim:
        raise ValueError("clouds live in different dimensions")
    if a.n != b.n:
        raise ValueError("clouds must have the same number of atoms")
    if not (a.equal_weights() and b.equal_weights()):
        raise ValueError("clouds must have uniform weights")
    ma, mb = a.total_mass, b.total_mass
    if abs(ma - mb) > 1e-9 * max(1.0, ma, mb):
        raise ValueError("clouds must carry the same total mass")


def wasserstein_discrete(a, b, p=2) -> float:
    """W_p between equal-size uniform clouds; p in {1, 2, ...} or inf."""
    _check(a, b)
    if not (p == np.inf or (isinstance(p, (int, float)) and p >= 1)):
        raise ValueError("p must be >= 1 or inf")
    w = a.total_mass / a.n
    if a.dim == 1:
        xa = np.sort(a.positions[:, 0])
        xb = np.sort(b.positions[:, 0])
        gaps = np.abs(xa - xb)
        if p == np.inf:
            return float(gaps.max())
        return float((w * (gaps ** p).sum()) ** (1.0 / p))
    dist = cdist(a.positions, b.positions)
    if p == np.inf:
        return float(solve_bottleneck(dist).value)
    asg = solve_min_sum(dist ** p)
    total = asg.value * a.n  # solver reports mean cost
    return float((w * total) ** (1.0 / p))
