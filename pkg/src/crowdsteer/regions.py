"""Control regions.

A region is an open set omega in R^d with a signed distance function that is
positive inside.  Three shapes are supported: axis-aligned boxes (any
dimension), balls (any dimension) and convex polygons (2D).  Each region
carries an erosion margin; the effective set is the margin-eroded one, which
is what the planner uses to keep control bubbles strictly inside omega.
"""

from __future__ import annotations

import math

import numpy as np

from .kernels import (REGION_BALL, REGION_BOX, REGION_POLY, TOL_BOUNDARY,
                      np_sd)


class Region:
    kind: int = -1

    def __init__(self, dim: int, params: np.ndarray, margin: float = 0.0):
        self.dim = dim
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.margin = float(margin)

    def pack(self):
        return self.kind, self.params, self.margin

    def sd(self, x):
        """Signed distance to the eroded region, positive inside."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = np_sd(self.kind, self.params, self.margin, np.atleast_2d(x))
        return float(out[0]) if single else out

    def contains(self, x, closed: bool = False):
        s = self.sd(x)
        return s >= -TOL_BOUNDARY if closed else s > 0.0

    def eroded(self, delta: float) -> "Region":
        out = self.__class__.__new__(self.__class__)
        Region.__init__(out, self.dim, self.params, self.margin + delta)
        return out

    # subclasses implement: inradius, center, bbox, boundary_points,
    # interior_points, to_dict

    def interior_points(self, k: int = 256) -> np.ndarray:
        lo, hi = self.bbox()
        m = max(2, int(math.ceil(k ** (1.0 / self.dim))))
        axes = [np.linspace(lo[j], hi[j], m + 2)[1:-1] for j in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        pts = pts[self.sd(pts) > 0.0]
        if pts.shape[0] == 0:
            return np.atleast_2d(self.center)
        return pts

    def sample_points(self, k_boundary: int = 256, k_interior: int = 256):
        return np.vstack([self.boundary_points(k_boundary),
                          self.interior_points(k_interior)])


class Box(Region):
    kind = REGION_BOX

    def __init__(self, lo, hi, margin: float = 0.0):
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1D arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box requires lo < hi on every axis")
        d = lo.shape[0]
        params = np.concatenate([[float(d)], lo, hi])
        super().__init__(d, params, margin)

    @property
    def lo(self):
        return self.params[1:1 + self.dim] + self.margin

    @property
    def hi(self):
        return self.params[1 + self.dim:1 + 2 * self.dim] - self.margin

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def inradius(self):
        return float(0.5 * np.min(self.hi - self.lo))

    def bbox(self):
        return self.lo.copy(), self.hi.copy()

    def boundary_points(self, k: int = 256) -> np.ndarray:
        lo, hi = self.lo, self.hi
        d = self.dim
        if d == 1:
            return np.array([[lo[0]], [hi[0]]])
        per_face = max(2, int(math.ceil((k / (2 * d)) ** (1.0 / (d - 1)))))
        pts = []
        for j in range(d):
            others = [np.linspace(lo[i], hi[i], per_face)
                      for i in range(d) if i != j]
            mesh = np.meshgrid(*others, indexing="ij")
            flat = np.stack([g.ravel() for g in mesh], axis=1)
            for val in (lo[j], hi[j]):
                face = np.empty((flat.shape[0], d))
                face[:, j] = val
                face[:, [i for i in range(d) if i != j]] = flat
                pts.append(face)
        return np.vstack(pts)

    def to_dict(self):
        return {"type": "box",
                "lo": (self.params[1:1 + self.dim]).tolist(),
                "hi": (self.params[1 + self.dim:1 + 2 * self.dim]).tolist()}


class Ball(Region):
    kind = REGION_BALL

    def __init__(self, center, radius: float, margin: float = 0.0):
        center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        if radius <= 0.0:
            raise ValueError("ball requires radius > 0")
        d = center.shape[0]
        params = np.concatenate([[float(d)], center, [float(radius)]])
        super().__init__(d, params, margin)

    @property
    def center(self):
        return self.params[1:1 + self.dim].copy()

    @property
    def radius(self):
        return float(self.params[1 + self.dim]) - self.margin

    @property
    def inradius(self):
        return self.radius

    def bbox(self):
        c, r = self.center, self.radius
        return c - r, c + r

    def boundary_points(self, k: int = 256) -> np.ndarray:
        c, r = self.center, self.radius
        d = self.dim
        if d == 1:
            return np.array([[c[0] - r], [c[0] + r]])
        if d == 2:
            th = np.linspace(0.0, 2.0 * np.pi, k, endpoint=False)
            return np.stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th)],
                            axis=1)
        rng = np.random.default_rng(1234)
        g = rng.standard_normal((k, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return c + r * g

    def to_dict(self):
        return {"type": "ball", "center": self.center.tolist(),
                "radius": float(self.params[1 + self.dim])}


class ConvexPolygon(Region):
    kind = REGION_POLY

    def __init__(self, vertices, margin: float = 0.0):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon requires at least 3 vertices in 2D")
        area2 = 0.0
        m = v.shape[0]
        for i in range(m):
            a, b = v[i], v[(i + 1) % m]
            area2 += a[0] * b[1] - b[0] * a[1]
        if area2 < 0.0:
            v = v[::-1].copy()
        # CCW order; outward normal of edge a->b is (ey, -ex)/|e|
        edges = np.empty((m, 3))
        for i in range(m):
            a, b = v[i], v[(i + 1) % m]
            e = b - a
            ln = float(np.hypot(e[0], e[1]))
            if ln <= 0.0:
                raise ValueError("polygon has a repeated vertex")
            n = np.array([e[1], -e[0]]) / ln
            edges[i] = [n[0], n[1], float(n @ a)]
        # convexity: every vertex satisfies every edge constraint
        slack = edges[:, 2][None, :] - v @ edges[:, :2].T
        if slack.min() < -1e-9 * max(1.0, np.abs(v).max()):
            raise ValueError("polygon is not convex")
        params = np.concatenate([[float(m)], v.ravel(), edges.ravel()])
        super().__init__(2, params, margin)
        self._cheb = None

    @property
    def vertices(self):
        m = int(self.params[0])
        return self.params[1:1 + 2 * m].reshape(m, 2).copy()

    @property
    def edges(self):
        m = int(self.params[0])
        return self.params[1 + 2 * m:1 + 5 * m].reshape(m, 3).copy()

    def _chebyshev(self):
        if self._cheb is None:
            from scipy.optimize import linprog
            e = self.edges
            res = linprog(c=[0.0, 0.0, -1.0],
                          A_ub=np.column_stack([e[:, :2], np.ones(len(e))]),
                          b_ub=e[:, 2], bounds=[(None, None)] * 2 + [(0, None)],
                          method="highs")
            if not res.success:
                raise ValueError("degenerate polygon")
            self._cheb = (res.x[:2].copy(), float(res.x[2]))
        return self._cheb

    @property
    def center(self):
        return self._chebyshev()[0].copy()

    @property
    def inradius(self):
        return self._chebyshev()[1] - self.margin

    def offset_vertices(self) -> np.ndarray:
        """Vertices of the margin-eroded polygon (adjacent offset lines)."""
        e = self.edges
        m = e.shape[0]
        out = np.empty((m, 2))
        for i in range(m):
            n1, b1 = e[i, :2], e[i, 2] - self.margin
            j = (i + 1) % m
            n2, b2 = e[j, :2], e[j, 2] - self.margin
            mat = np.array([n1, n2])
            det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
            if abs(det) < 1e-14:
                raise ValueError("parallel adjacent edges")
            out[i] = np.linalg.solve(mat, np.array([b1, b2]))
        return out

    def bbox(self):
        v = self.offset_vertices() if self.margin > 0.0 else self.vertices
        return v.min(axis=0), v.max(axis=0)

    def boundary_points(self, k: int = 256) -> np.ndarray:
        v = self.offset_vertices() if self.margin > 0.0 else self.vertices
        m = v.shape[0]
        per_edge = max(2, int(math.ceil(k / m)))
        pts = []
        for i in range(m):
            a, b = v[i], v[(i + 1) % m]
            t = np.linspace(0.0, 1.0, per_edge, endpoint=False)
            pts.append(a + t[:, None] * (b - a))
        return np.vstack(pts)

    def to_dict(self):
        return {"type": "polygon", "vertices": self.vertices.tolist()}


def region_from_dict(spec: dict) -> Region:
    try:
        kind = spec["type"]
    except (KeyError, TypeError):
        raise ValueError("region spec needs a 'type' key") from None
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "polygon":
        return ConvexPolygon(spec["vertices"])
    raise ValueError(f"unknown region type {kind!r}")
