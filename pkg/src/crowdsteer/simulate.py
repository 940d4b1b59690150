"""Lagrangian particle runs of the controlled flow, with diagnostics.

The simulator advances every atom of a cloud under ``x' = v(x) + u(x, t)``
with the same RK4 kernel the synthesis code uses, so a run with no control
is bit-identical to the free flow.  Diagnostics are optional: given a
target cloud, each snapshot gets a W1 distance (subsampled above a size
cap, where the assignment solver would dominate the run) and a histogram
max-density estimate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .backend import resolve_backend
from .cloud import ParticleCloud, estimate_density
from .flow import FlowConfig, _dummy_region, grid_steps
from .kernels import build_active_lists, empty_windows
from .wasserstein import wasserstein_discrete

# above this atom count the assignment-based W1 subsamples (the final
# snapshot is exempt: the verdict number is computed at full resolution)
W1_SUBSAMPLE = 500

# histogram pitch (space units) for the max-density series
DENSITY_BIN = 0.05


@dataclass
class RunReport:
    """Summary of one simulation run."""

    snapshot_times: list
    w1_series: list | None
    max_density_series: list | None
    final_w1: float | None
    wall_time: float
    n_steps: int
    dt: float
    backend: str
    total_mass: float
    n_atoms: int
    density_bin: float | None = None
    out_of_domain_mass: list | None = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def peak_density(self) -> float | None:
        if not self.max_density_series:
            return None
        return max(self.max_density_series)

    def to_dict(self) -> dict:
        out = {
            "snapshot_times": [float(t) for t in self.snapshot_times],
            "n_steps": self.n_steps,
            "dt": self.dt,
            "backend": self.backend,
            "total_mass": self.total_mass,
            "n_atoms": self.n_atoms,
            "wall_time": self.wall_time,
        }
        if self.w1_series is not None:
            out["w1_series"] = [float(v) for v in self.w1_series]
            out["final_w1"] = self.final_w1
        if self.max_density_series is not None:
            out["max_density_series"] = [float(v)
                                         for v in self.max_density_series]
            out["peak_density"] = self.peak_density
            out["density_bin"] = self.density_bin
            out["out_of_domain_mass"] = [float(v)
                                         for v in self.out_of_domain_mass]
        out.update(self.meta)
        return out


def _subsampled(cloud: ParticleCloud, k: int, rng) -> ParticleCloud:
    idx = rng.choice(cloud.n, size=k, replace=False)
    return ParticleCloud(cloud.positions[idx],
                         np.full(k, cloud.total_mass / k))


def _w1(a: ParticleCloud, b: ParticleCloud, cap: int | None,
        seed: int) -> float:
    """W1 between equal-weight clouds, subsampling the assignment solve.

    In one dimension the exact sorted computation is cheap at any size, so
    the cap only applies to d >= 2.  cap=None forces full resolution.
    """
    rng = np.random.default_rng(seed)
    k = min(a.n, b.n)
    if cap is not None and a.dim >= 2:
        k = min(k, cap)
    if a.n != k:
        a = _subsampled(a, k, rng)
    if b.n != k:
        b = _subsampled(b, k, rng)
    return wasserstein_discrete(a, b, p=1)


def _density_box(clouds, target=None):
    pts = [c.positions for c in clouds]
    if target is not None:
        pts.append(target.positions)
    pts = np.vstack(pts)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = 1e-9 * np.maximum(1.0, np.abs(hi))
    return lo - pad, hi + pad


def track_diagnostics(clouds, snapshot_times, target: ParticleCloud | None,
                      density_box=None, density_bin: float = DENSITY_BIN,
                      subsample: int = W1_SUBSAMPLE, seed: int = 42,
                      final_full: bool = True) -> RunReport:
    """W1-to-target and max-density series for a list of snapshot clouds.

    The last snapshot's W1 is computed without the subsample cap by
    default: it is the number runs are judged by, and one exact solve is
    affordable where one per snapshot is not.
    """
    t0 = time.perf_counter()
    w1_series = None
    if target is not None:
        w1_series = []
        last = len(clouds) - 1
        for i, c in enumerate(clouds):
            cap = None if (final_full and i == last) else subsample
            w1_series.append(_w1(c, target, cap, seed))
    lo, hi = density_box if density_box is not None \
        else _density_box(clouds, target)
    bins = [max(1, int(round((hi[j] - lo[j]) / density_bin)))
            for j in range(len(lo))]
    dens = []
    outside = []
    for c in clouds:
        rep = estimate_density(c, lo, hi, bins)
        dens.append(rep.max_density)
        outside.append(rep.outside_mass)
    c0 = clouds[0]
    return RunReport(
        snapshot_times=[float(t) for t in snapshot_times],
        w1_series=w1_series,
        max_density_series=dens,
        final_w1=float(w1_series[-1]) if w1_series else None,
        wall_time=time.perf_counter() - t0,
        n_steps=0, dt=0.0, backend=resolve_backend(),
        total_mass=c0.total_mass, n_atoms=c0.n,
        density_bin=density_bin, out_of_domain_mass=outside)


def run(initial: ParticleCloud, field, control, T: float,
        config: FlowConfig | None = None, snapshots=(),
        target: ParticleCloud | None = None, density_box=None,
        density_bin: float = DENSITY_BIN, subsample: int = W1_SUBSAMPLE,
        seed: int = 42):
    """Advance a cloud to time T and report diagnostics.

    control may be None (free flow) or a ControlField; the control is
    already clipped to its region, so atoms outside it, or captured by no
    window, follow arithmetic identical to the uncontrolled flow.  Weights
    are never touched.  Returns (RunReport, snapshot clouds, final cloud);
    snapshot times are rounded to the step grid and reported as rounded.
    """
    config = config or FlowConfig()
    dt = config.dt
    n_steps = grid_steps(T, dt)
    snap_req = np.asarray(sorted(float(t) for t in snapshots))
    if snap_req.size and (snap_req[0] < -1e-9 or snap_req[-1] > T + 1e-9):
        raise ValueError("snapshot times must lie in [0, T]")
    snap_steps = np.unique(np.clip(
        np.rint(snap_req / dt).astype(np.int64), 0, n_steps))
    snap_times = snap_steps * dt

    pos = np.ascontiguousarray(initial.positions, dtype=np.float64).copy()
    n, d = pos.shape
    snaps = np.empty((snap_steps.size, n, d))

    if control is not None:
        if control.dim != d:
            raise ValueError("control dimension does not match the cloud")
        w = control.packed()
        act_off, act_idx = build_active_lists(control.w_kon, control.w_koff,
                                              n_steps)
    else:
        w = empty_windows(d)
        act_off, act_idx = build_active_lists(w["w_kon"], w["w_kon"],
                                              n_steps)
    kind, params, margin = (control.region.pack() if control is not None
                            else _dummy_region(d))
    ops, args, lens, stack_need = field.packed

    backend = resolve_backend()
    sim = kernels._sim if backend == "numba" else kernels.np_sim
    t0 = time.perf_counter()
    sim(ops, args, lens, stack_need, pos, dt, n_steps, 0, 1.0, kind, params,
        margin, w["w_kon"], w["w_kshrink"], w["w_poff"], w["w_npts"],
        w["w_h"], w["w_beta"], w["w_floor"], w["w_gain"], w["w_path"],
        w["w_vel"], act_off, act_idx, snap_steps, snaps)
    wall = time.perf_counter() - t0

    clouds = [ParticleCloud(snaps[i].copy(), initial.weights)
              for i in range(snap_steps.size)]
    if clouds:
        diag = track_diagnostics(clouds, snap_times, target,
                                 density_box=density_box,
                                 density_bin=density_bin,
                                 subsample=subsample, seed=seed)
        report = diag
        report.wall_time = wall + diag.wall_time
    else:
        report = RunReport(snapshot_times=[], w1_series=None,
                           max_density_series=None, final_w1=None,
                           wall_time=wall, n_steps=0, dt=dt, backend=backend,
                           total_mass=initial.total_mass, n_atoms=n)
    report.n_steps = n_steps
    report.dt = dt
    final = ParticleCloud(pos, initial.weights)
    report.meta["final_positions_at"] = float(n_steps * dt)
    return report, clouds, final
