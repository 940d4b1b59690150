"""Measures: piecewise-constant densities, particle clouds, density grids.

Both measure types expose the same small slicing interface used by the mesh
builder: total_mass / bbox / mass_in_box / cut / centroid_in_box.  For box
densities everything is exact (closed-form piecewise-linear mass functions);
for clouds the same operations act on weighted atoms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class BoxDensitySpec:
    """Sum of uniform densities on axis-aligned boxes.

    Components are (lo, hi, density) with pairwise-disjoint boxes; density is
    mass per unit volume.
    """

    def __init__(self, components):
        comps = []
        dim = None
        for c in components:
            if isinstance(c, dict):
                lo, hi, rho = c["lo"], c["hi"], c["density"]
            else:
                lo, hi, rho = c
            lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
            hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
            rho = float(rho)
            if dim is None:
                dim = lo.shape[0]
            if lo.shape[0] != dim or hi.shape[0] != dim:
                raise ValueError("inconsistent component dimensions")
            if not np.all(lo < hi):
                raise ValueError("component box requires lo < hi")
            if rho <= 0.0:
                raise ValueError("component density must be positive")
            comps.append((lo, hi, rho))
        if not comps:
            raise ValueError("density spec needs at least one component")
        self.components = comps
        self.dim = dim

    @property
    def total_mass(self) -> float:
        return float(sum(rho * np.prod(hi - lo)
                         for lo, hi, rho in self.components))

    @property
    def max_density(self) -> float:
        return max(rho for _, _, rho in self.components)

    def bbox(self):
        lo = np.min([c[0] for c in self.components], axis=0)
        hi = np.max([c[1] for c in self.components], axis=0)
        return lo, hi

    def tight_bbox(self, lo, hi):
        """Bounding box of the support intersected with [lo, hi]."""
        tlo = np.full(self.dim, np.inf)
        thi = np.full(self.dim, -np.inf)
        found = False
        for clo, chi, _ in self.components:
            a = np.maximum(clo, lo)
            b = np.minimum(chi, hi)
            if np.all(a < b):
                found = True
                tlo = np.minimum(tlo, a)
                thi = np.maximum(thi, b)
        if not found:
            return np.asarray(lo, float).copy(), np.asarray(hi, float).copy()
        return tlo, thi

    def mass_in_box(self, lo, hi) -> float:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        total = 0.0
        for clo, chi, rho in self.components:
            seg = np.minimum(chi, hi) - np.maximum(clo, lo)
            if np.all(seg > 0.0):
                total += rho * float(np.prod(seg))
        return total

    def cut(self, lo, hi, axis: int, target: float) -> float:
        """Coordinate c on the axis with mass of [lo,hi] below c equal to
        target.  Exact: the mass is piecewise linear in c."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        segs = []  # (a, b, rate): rate = d(mass)/dc on [a, b]
        for clo, chi, rho in self.components:
            a = max(clo[axis], lo[axis])
            b = min(chi[axis], hi[axis])
            if b <= a:
                continue
            cross = np.minimum(chi, hi) - np.maximum(clo, lo)
            cross = np.delete(cross, axis)
            if np.all(cross > 0.0):
                segs.append((a, b, rho * float(np.prod(cross))))
        if not segs:
            return float(lo[axis])
        points = sorted({s[0] for s in segs} | {s[1] for s in segs})
        acc = 0.0
        for p0, p1 in zip(points[:-1], points[1:]):
            rate = sum(r for a, b, r in segs if a <= p0 and b >= p1)
            step = rate * (p1 - p0)
            if acc + step >= target - 1e-15:
                if rate <= 0.0:
                    return float(p1)
                return float(p0 + (target - acc) / rate)
            acc += step
        return float(points[-1])

    def centroid_in_box(self, lo, hi):
        """(mass centroid, mass) of the restriction to [lo, hi]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        m = 0.0
        c = np.zeros(self.dim)
        for clo, chi, rho in self.components:
            a = np.maximum(clo, lo)
            b = np.minimum(chi, hi)
            seg = b - a
            if np.all(seg > 0.0):
                mc = rho * float(np.prod(seg))
                m += mc
                c += mc * 0.5 * (a + b)
        if m <= 0.0:
            return 0.5 * (lo + hi), 0.0
        return c / m, m

    def density_at(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros(x.shape[0])
        for clo, chi, rho in self.components:
            inside = np.all((x >= clo) & (x < chi), axis=1)
            out[inside] += rho
        return out

    # -- sampling ----------------------------------------------------------

    def sample(self, n: int, method: str = "stratified",
               seed: int = 42) -> "ParticleCloud":
        if n <= 0:
            raise ValueError("need n >= 1 atoms")
        w = self.total_mass / n
        if method == "stratified":
            pts = []
            lo, hi = self.bbox()
            self._stratify(lo, hi, n, pts)
            pos = np.asarray(pts)
        elif method == "random":
            rng = np.random.default_rng(seed)
            masses = np.array([rho * np.prod(chi - clo)
                               for clo, chi, rho in self.components])
            counts = rng.multinomial(n, masses / masses.sum())
            pos = np.vstack([
                rng.uniform(clo, chi, size=(k, self.dim))
                for (clo, chi, _), k in zip(self.components, counts) if k
            ])
        else:
            raise ValueError("method must be 'stratified' or 'random'")
        return ParticleCloud(pos, np.full(len(pos), w))

    def _stratify(self, lo, hi, k, out):
        # recursive equal-mass bisection; leaves get the mass centroid
        lo, hi = self.tight_bbox(lo, hi)
        if k == 1:
            c, _ = self.centroid_in_box(lo, hi)
            out.append(c)
            return
        axis = int(np.argmax(hi - lo))
        kl = k // 2
        m = self.mass_in_box(lo, hi)
        c = self.cut(lo, hi, axis, m * kl / k)
        hi_l = hi.copy()
        hi_l[axis] = c
        lo_r = lo.copy()
        lo_r[axis] = c
        self._stratify(lo, hi_l, kl, out)
        self._stratify(lo_r, hi, k - kl, out)


class ParticleCloud:
    """Weighted atoms in R^d."""

    def __init__(self, positions, weights=None):
        positions = np.ascontiguousarray(np.atleast_2d(positions),
                                         dtype=np.float64)
        n = positions.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ValueError("weights must be one scalar per atom")
        if np.any(weights < 0.0):
            raise ValueError("weights must be nonnegative")
        self.positions = positions
        self.weights = weights

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def equal_weights(self, rtol: float = 1e-9) -> bool:
        w = self.weights
        return bool(np.allclose(w, w[0], rtol=rtol, atol=0.0))

    def bbox(self):
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        pad = np.maximum(1e-9, 1e-9 * np.abs(hi))
        return lo - pad, hi + pad

    def tight_bbox(self, lo, hi):
        m = np.all((self.positions >= lo) & (self.positions < hi), axis=1)
        if not m.any():
            return np.asarray(lo, float).copy(), np.asarray(hi, float).copy()
        p = self.positions[m]
        plo, phi = p.min(axis=0), p.max(axis=0)
        pad = np.maximum(1e-12, 1e-12 * np.abs(phi))
        return plo - pad, phi + pad

    def mass_in_box(self, lo, hi) -> float:
        m = np.all((self.positions >= lo) & (self.positions < hi), axis=1)
        return float(self.weights[m].sum())

    def cut(self, lo, hi, axis: int, target: float) -> float:
        m = np.all((self.positions >= lo) & (self.positions < hi), axis=1)
        if not m.any():
            return float(lo[axis])
        coords = self.positions[m, axis]
        w = self.weights[m]
        order = np.argsort(coords, kind="stable")
        cum = np.cumsum(w[order])
        idx = int(np.searchsorted(cum, target - 1e-12))
        if idx >= len(coords):
            return float(np.asarray(hi, float)[axis])
        # cut just above the atom that fills the target so it stays left
        return float(np.nextafter(coords[order][idx], np.inf))

    def centroid_in_box(self, lo, hi):
        m = np.all((self.positions >= lo) & (self.positions < hi), axis=1)
        mass = float(self.weights[m].sum())
        if mass <= 0.0:
            return 0.5 * (np.asarray(lo, float) + np.asarray(hi, float)), 0.0
        c = (self.weights[m, None] * self.positions[m]).sum(axis=0) / mass
        return c, mass

    def transported(self, positions) -> "ParticleCloud":
        return ParticleCloud(positions, self.weights.copy())

    # -- csv ---------------------------------------------------------------

    @classmethod
    def from_csv(cls, path) -> "ParticleCloud":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        header = [h.strip() for h in header]
        if header[-1] != "weight":
            raise ValueError("last csv column must be 'weight'")
        d = len(header) - 1
        expect = [f"x{i + 1}" for i in range(d)]
        if header[:-1] != expect:
            raise ValueError(f"csv columns must be {expect + ['weight']}")
        data = np.asarray(rows, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != d + 1:
            raise ValueError("malformed csv rows")
        return cls(data[:, :d], data[:, d])

    def to_csv(self, path) -> None:
        d = self.dim
        header = ",".join([f"x{i + 1}" for i in range(d)] + ["weight"])
        data = np.column_stack([self.positions, self.weights])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def measure_from_dict(spec: dict, base_dir=None):
    """Build a measure from its scenario description."""
    kind = spec.get("type")
    if kind == "boxes":
        return BoxDensitySpec(spec["components"])
    if kind == "atoms":
        if "csv" in spec:
            import os
            path = spec["csv"]
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            return ParticleCloud.from_csv(path)
        return ParticleCloud(np.asarray(spec["positions"], dtype=np.float64),
                             np.asarray(spec["weights"], dtype=np.float64)
                             if "weights" in spec else None)
    raise ValueError(f"unknown measure type {kind!r}")


@dataclass
class DensityReport:
    """Histogram density estimate on a regular grid."""

    values: np.ndarray          # mass / cell volume
    edges: list                 # per-axis bin edges
    cell_volume: float
    inside_mass: float
    outside_mass: float

    @property
    def max_density(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def peak_cell_center(self) -> np.ndarray:
        idx = np.unravel_index(int(np.argmax(self.values)),
                               self.values.shape)
        return np.array([0.5 * (e[i] + e[i + 1])
                         for e, i in zip(self.edges, idx)])


def estimate_density(cloud: ParticleCloud, lo, hi, bins) -> DensityReport:
    """Histogram estimate of the density of a weighted cloud on [lo, hi]."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    d = cloud.dim
    if np.isscalar(bins):
        bins = [int(bins)] * d
    edges = [np.linspace(lo[j], hi[j], bins[j] + 1) for j in range(d)]
    hist, _ = np.histogramdd(cloud.positions, bins=edges,
                             weights=cloud.weights)
    vol = float(np.prod([(hi[j] - lo[j]) / bins[j] for j in range(d)]))
    inside = float(hist.sum())
    return DensityReport(values=hist / vol, edges=edges, cell_volume=vol,
                         inside_mass=inside,
                         outside_mass=cloud.total_mass - inside)
