"""Equal-mass cell meshes over crowd measures.

A mesh splits a measure of mass gamma into at most n^4 cells of mass
gamma/n^4 each, built by cumulative-mass slicing: an n-by-n geometric grid,
column slices of mass gamma/n^3 inside each grid cell, then row slices of
mass gamma/n^4 inside each column.  Trailing slivers with less than a full
column of mass are discarded, which is where the [n^4 - n^3, n^4] cell-count
window comes from.  Each kept cell carries a concentric inner box trimmed to
mass gamma/n^4 - gamma/n^6; the gap between neighbouring inner boxes is what
later keeps per-cell control tubes disjoint.

Construction is exact for piecewise-uniform box densities (cuts solve a
piecewise-linear mass equation).  For atom clouds the cut positions land on
atom coordinates, so cell masses are only as equal as the atoms allow; the
mass invariants are stated for density specs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["MeshCell", "MeshCells", "build_mesh"]


@dataclass
class MeshCell:
    outer_lo: np.ndarray
    outer_hi: np.ndarray
    inner_lo: np.ndarray
    inner_hi: np.ndarray
    mass: float
    rep: np.ndarray
    index: tuple
    adjusted: bool = False

    @property
    def inner_halfwidth(self) -> np.ndarray:
        return 0.5 * (self.inner_hi - self.inner_lo)

    @property
    def outer_halfwidth(self) -> np.ndarray:
        return 0.5 * (self.outer_hi - self.outer_lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.inner_lo + self.inner_hi)


@dataclass
class MeshCells:
    """Kept cells of an equal-mass mesh (see module docstring)."""

    cells: list
    n: int
    dim: int
    gamma: float
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray

    def __len__(self):
        return len(self.cells)

    @property
    def cell_mass(self) -> float:
        n = self.n
        return self.gamma / n ** 4 - self.gamma / n ** 6

    def reps(self) -> np.ndarray:
        return np.array([c.rep for c in self.cells], dtype=np.float64)

    def masses(self) -> np.ndarray:
        return np.array([c.mass for c in self.cells], dtype=np.float64)

    def kept_mass(self) -> float:
        return float(self.masses().sum())

    def to_csv(self, path) -> None:
        d = self.dim
        cols = ["k", "i", "j"]
        for tag in ("outer_lo", "outer_hi", "inner_lo", "inner_hi"):
            cols += [f"{tag}{a + 1}" for a in range(d)]
        cols += ["mass"] + [f"rep{a + 1}" for a in range(d)] + ["adjusted"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for c in self.cells:
                row = list(c.index)
                for arr in (c.outer_lo, c.outer_hi, c.inner_lo, c.inner_hi):
                    row += [repr(float(v)) for v in arr]
                row.append(repr(float(c.mass)))
                row += [repr(float(v)) for v in c.rep]
                row.append(int(c.adjusted))
                wr.writerow(row)

    @classmethod
    def from_csv(cls, path, n: int, gamma: float) -> "MeshCells":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"empty mesh file: {path}")
        d = sum(1 for key in rows[0] if key.startswith("rep"))
        cells = []
        for row in rows:
            def vec(tag, row=row):
                return np.array([float(row[f"{tag}{a + 1}"])
                                 for a in range(d)])
            cells.append(MeshCell(
                outer_lo=vec("outer_lo"), outer_hi=vec("outer_hi"),
                inner_lo=vec("inner_lo"), inner_hi=vec("inner_hi"),
                mass=float(row["mass"]), rep=vec("rep"),
                index=(int(row["k"]), int(row["i"]), int(row["j"])),
                adjusted=bool(int(row["adjusted"])),
            ))
        lo = np.min([c.outer_lo for c in cells], axis=0)
        hi = np.max([c.outer_hi for c in cells], axis=0)
        return cls(cells=cells, n=n, dim=d, gamma=gamma,
                   bbox_lo=lo, bbox_hi=hi)


def _representative(measure, inner_lo, inner_hi):
    """Mass centroid of the inner box, nudged onto the support if the
    centroid happens to fall in a hole of the density."""
    rep, _ = measure.centroid_in_box(inner_lo, inner_hi)
    density_at = getattr(measure, "density_at", None)
    if density_at is None:
        return rep, False
    if float(np.atleast_1d(density_at(rep))[0]) > 0.0:
        return rep, False
    # centroid in a zero-density hole: take the midpoint of the largest
    # component overlap instead, which lies in the support by construction
    best = None
    for clo, chi, rho in measure.components:
        a = np.maximum(clo, inner_lo)
        b = np.minimum(chi, inner_hi)
        if np.all(a < b):
            m = rho * float(np.prod(b - a))
            if best is None or m > best[0]:
                best = (m, 0.5 * (a + b))
    if best is None:
        return rep, True
    return best[1], True


def _shrink_inner(measure, lo, hi, target):
    """Concentric sub-box of [lo, hi] holding `target` mass (bisection on
    the scale factor; exact up to fp for piecewise-uniform densities)."""
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    a, b = 0.0, 1.0
    for _ in range(80):
        lam = 0.5 * (a + b)
        m = measure.mass_in_box(c - lam * h, c + lam * h)
        if m < target:
            a = lam
        else:
            b = lam
        if b - a < 1e-15:
            break
    lam = b
    return c - lam * h, c + lam * h


def _column_cells(measure, lo, hi, n, gamma, k, i, cells):
    """Cut one column box of mass gamma/n^3 into n row cells of mass
    gamma/n^4 and append them (axis 1 in 2D, axis 0 in 1D)."""
    d = lo.shape[0]
    axis = 1 if d == 2 else 0
    cell_target = gamma / n ** 4
    inner_target = cell_target - gamma / n ** 6
    edges = [lo[axis]]
    for j in range(1, n):
        edges.append(measure.cut(lo, hi, axis, j * cell_target))
    edges.append(hi[axis])
    for j in range(n):
        clo, chi = lo.copy(), hi.copy()
        clo[axis], chi[axis] = edges[j], edges[j + 1]
        if not chi[axis] > clo[axis]:
            continue
        ilo, ihi = _shrink_inner(measure, clo, chi, inner_target)
        rep, adjusted = _representative(measure, ilo, ihi)
        cells.append(MeshCell(outer_lo=clo, outer_hi=chi, inner_lo=ilo,
                              inner_hi=ihi, mass=inner_target, rep=rep,
                              index=(k, i, j), adjusted=adjusted))


def build_mesh(measure, n: int, bbox=None) -> MeshCells:
    """Build the equal-mass mesh of `measure` with grid parameter n.

    measure: BoxDensitySpec or ParticleCloud (anything with total_mass,
    tight_bbox, mass_in_box, cut and centroid_in_box).  bbox optionally
    overrides the bounding box; by default the tight per-axis support box
    is used.  Supported in dimensions 1 and 2.
    """
    if n < 2:
        raise ValueError(f"mesh parameter n must be >= 2, got {n}")
    gamma = measure.total_mass
    if not np.isfinite(gamma) or gamma <= 0.0:
        raise ValueError("degenerate measure: zero mass in bounding box")
    if bbox is None:
        probe_lo, probe_hi = measure.bbox()
        lo, hi = measure.tight_bbox(probe_lo - 1e-9, probe_hi + 1e-9)
    else:
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
    d = lo.shape[0]
    if d not in (1, 2):
        raise ValueError(f"mesh construction supports d in {{1, 2}}, got {d}")
    if measure.mass_in_box(lo, hi) <= 0.0:
        raise ValueError("degenerate measure: zero mass in bounding box")

    col_target = gamma / n ** 3
    cells: list = []
    # top-level geometric grid, row-major flat index k
    tops = []
    ax_edges = [np.linspace(lo[a], hi[a], n + 1) for a in range(d)]
    if d == 1:
        for kx in range(n):
            tops.append((np.array([ax_edges[0][kx]]),
                         np.array([ax_edges[0][kx + 1]])))
    else:
        for ky in range(n):
            for kx in range(n):
                tops.append((np.array([ax_edges[0][kx], ax_edges[1][ky]]),
                             np.array([ax_edges[0][kx + 1],
                                       ax_edges[1][ky + 1]])))
    for k, (tlo, thi) in enumerate(tops):
        m_k = measure.mass_in_box(tlo, thi)
        n_cols = int(np.floor(m_k / col_target + 1e-9))
        if n_cols == 0:
            continue
        left = tlo[0]
        for i in range(n_cols):
            if i + 1 < n_cols:
                right = measure.cut(tlo, thi, 0, (i + 1) * col_target)
            elif m_k - n_cols * col_target < 1e-9 * gamma:
                right = thi[0]  # top cell divides exactly, no sliver
            else:
                right = measure.cut(tlo, thi, 0, (i + 1) * col_target)
            clo, chi = tlo.copy(), thi.copy()
            clo[0], chi[0] = left, right
            if chi[0] > clo[0]:
                _column_cells(measure, clo, chi, n, gamma, k, i, cells)
            left = right

    lo_bound = n ** 4 - n ** 3
    if not lo_bound <= len(cells) <= n ** 4:
        raise ValueError(
            f"mesh cell count {len(cells)} outside [{lo_bound}, {n ** 4}]; "
            "the measure is too irregular for this grid parameter")
    return MeshCells(cells=cells, n=n, dim=d, gamma=gamma,
                     bbox_lo=lo, bbox_hi=hi)
