"""Evoluted sets: every position the flow can reach from the (closure of
the) control region within a time budget.

The set omega^t = union of flow images Phi_tau(omega) for tau in [0, t] is
realized as a point sample: boundary and interior samples of omega advected
along the flow on the integration time grid, deduplicated on a fine spatial
grid.  Membership is distance-to-nearest-sample with a declared resolution,
so dilating queries by that resolution keeps conservative directions sound.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .flow import FlowConfig, grid_steps
from .kernels import empty_windows
from . import kernels
from .backend import resolve_backend
from .kernels import np_sim


class EvolutedSet:
    """Sampled omega^t with nearest-sample membership."""

    def __init__(self, points: np.ndarray, resolution: float, horizon: float):
        self.points = np.atleast_2d(points)
        self.resolution = float(resolution)
        self.horizon = float(horizon)
        self._tree = cKDTree(self.points)

    def contains(self, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        d, _ = self._tree.query(np.atleast_2d(x), k=1)
        out = d <= self.resolution
        return bool(out[0]) if single else out

    def mass_within(self, cloud, radius: float) -> float:
        """Mass of the cloud within `radius` of the set (resolution added,
        which can only enlarge the answer)."""
        d, _ = self._tree.query(cloud.positions, k=1)
        return float(cloud.weights[d <= radius + self.resolution].sum())


class EvolutedArchive:
    """Advected region samples for every grid time up to a max horizon.

    Built once, then sliced into EvolutedSet prefixes; slicing is cheap, so
    scanning many horizons (the certificate does) costs one integration.
    """

    def __init__(self, field, region, horizon: float,
                 config: FlowConfig | None = None, n_boundary: int = 96,
                 n_interior: int = 144):
        config = config or FlowConfig()
        self.config = config
        self.horizon = float(horizon)
        base = region.sample_points(n_boundary, n_interior)
        ns, d = base.shape
        if ns > 1:
            nn, _ = cKDTree(base).query(base, k=2)
            self.spacing = float(np.max(nn[:, 1]))
        else:
            self.spacing = max(1e-6, 2.0 * getattr(region, "inradius", 1e-6))
        k = max(0, grid_steps(self.horizon, config.dt))
        self.snaps = np.empty((k + 1, ns, d))
        self.snaps[0] = base
        if k > 0:
            pos = np.ascontiguousarray(base.copy())
            ops, args, lens, stack_need = field.packed
            w = empty_windows(d)
            act_off = np.zeros(k + 1, dtype=np.int64)
            act_idx = np.zeros(0, dtype=np.int64)
            snap_steps = np.arange(1, k + 1, dtype=np.int64)
            fn = kernels._sim if resolve_backend() == "numba" else np_sim
            fn(ops, args, lens, stack_need, pos, config.dt, k, 0, 1.0,
               0, np.array([1.0, 0.0, 1.0]), 0.0, w["w_kon"], w["w_poff"],
               w["w_npts"], w["w_ropen"], w["w_beta"], w["w_rfloor"],
               w["w_gain"], w["w_path"], w["w_vel"], act_off, act_idx,
               snap_steps, self.snaps[1:])

    def prefix(self, t: float) -> EvolutedSet:
        """EvolutedSet for horizon t <= the archive horizon."""
        if t > self.horizon + 1e-9:
            raise ValueError("horizon exceeds the archive")
        k = min(self.snaps.shape[0] - 1, max(0, grid_steps(t, self.config.dt)))
        pts = self.snaps[:k + 1].reshape(-1, self.snaps.shape[2])
        # dedupe on a grid much finer than the declared resolution
        g = max(self.spacing / 4.0, 1e-9)
        q = np.unique(np.round(pts / g).astype(np.int64), axis=0)
        return EvolutedSet(q * g, resolution=self.spacing, horizon=t)


def build_evoluted_set(field, region, t: float,
                       config: FlowConfig | None = None,
                       n_boundary: int = 96,
                       n_interior: int = 144) -> EvolutedSet:
    archive = EvolutedArchive(field, region, t, config, n_boundary,
                              n_interior)
    return archive.prefix(t)
