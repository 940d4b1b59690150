"""Autonomous velocity fields.

Fields are given as comma-separated component expressions in the variables
``x1 .. xd`` (see :mod:`crowdsteer.expr`) and compiled once to postfix
programs shared by every kernel backend.
"""

from __future__ import annotations

import numpy as np

from .expr import pack_programs, parse_field_expression
from .kernels import np_eval_field


class VectorField:
    """A time-independent velocity field on R^d."""

    def __init__(self, source: str, dim: int):
        self.source = source
        self.dim = dim
        self.programs = parse_field_expression(source, dim)
        self.packed = pack_programs(self.programs)

    def __repr__(self):
        return f"VectorField({self.source!r}, dim={self.dim})"

    def evaluate(self, x):
        """Evaluate at one point (d,) or a batch (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        ops, args, lens, stack_need = self.packed
        out = np_eval_field(ops, args, lens, stack_need, np.atleast_2d(x))
        return out[0] if single else out

    __call__ = evaluate

    def _grid(self, lo, hi, n):
        axes = [np.linspace(lo[j], hi[j], n) for j in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def speed_bound(self, lo, hi, n: int = 21) -> float:
        """Estimated sup of |v| over the box [lo, hi] (grid sample)."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        x = self._grid(lo, hi, n)
        speed = np.linalg.norm(self.evaluate(x), axis=1)
        speed = speed[np.isfinite(speed)]
        return float(speed.max()) if speed.size else 0.0

    def lipschitz_bound(self, lo, hi, n: int = 15) -> float:
        """Estimated Lipschitz constant over the box [lo, hi].

        Central-difference Jacobians on a grid; the bound is the largest
        spectral norm found.  Good enough for step-size and margin
        heuristics, not a certified constant.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        x = self._grid(lo, hi, n)
        scale = float(np.max(hi - lo))
        h = max(scale, 1.0) * 1e-6
        cols = []
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            cols.append((self.evaluate(x + e) - self.evaluate(x - e))
                        / (2.0 * h))
        jac = np.stack(cols, axis=2)
        ok = np.isfinite(jac).all(axis=(1, 2))
        if not ok.any():
            return 0.0
        s = np.linalg.svd(jac[ok], compute_uv=False)
        return float(s[:, 0].max())
