"""Synthesis of steering controls as moving-tube velocity fields.

A control is a sum of windows.  Each window follows a center path c(t) and
applies u = s(rho) * (ff(t) + gain*(c(t) - x) - v(x)) inside a box around
the center, where rho is the scaled sup-norm distance to the center, s is a
quintic blend (1 on the inner box, 0 at twice its halfwidth), and the box
shrinks like exp(-beta*t) down to a floor fraction.  The box is also scaled
down near the region boundary so the support never leaves the region, and
evaluation is exactly zero outside it.

synthesize_micro builds one window per atom (straight transit, no feedback);
synthesize_macro builds one window per mesh cell (capture, transit, hold)
with feedback gain chosen by a doubling search until the shrunk tubes are
pairwise disjoint.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .assignment import pair_separation, solve_min_sum, transport_cost_matrix
from .fields import VectorField
from .flow import FlowConfig, entry_times, sample_paths
from .kernels import BLEND_EDGE, build_active_lists, empty_windows, np_sd
from .mintime import GeometricConditionError, minmax_pairing_time
from .regions import region_from_dict

_SD_TOL = 1e-9


class InfeasibleTimeError(RuntimeError):
    """Requested horizon is at or below the feasibility threshold."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class SeparationError(RuntimeError):
    """Two transport segments pass too close to fit disjoint tubes."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


@dataclass
class AgentPlan:
    """One atom's steering itinerary.

    Free flight until s0, straight transit y0 -> y1 inside the region during
    [s0, T - s1], free flight again until T.  r is the full-strength tube
    radius, R = 2r the support radius.
    """
    source: np.ndarray
    target: np.ndarray
    t0: float
    t1: float
    s0: float
    s1: float
    y0: np.ndarray
    y1: np.ndarray
    r: float
    R: float
    pair: int


@dataclass
class PairingReport:
    """Bookkeeping of the cell pairing behind a macroscopic control."""
    kept: int
    nominal_kept: int
    drop_budget: int
    dropped_infeasible: int
    dropped_trimmed: int
    sigma: np.ndarray  # source cell -> target cell, -1 for dropped
    r_dom: float
    s_mesh: float
    erosion: float
    gain: float
    beta: float
    floor: float
    delta: float
    mean_cost: float
    disjoint_margin: float
    warnings: list = dataclass_field(default_factory=list)

    def to_dict(self):
        return {
            "kept": self.kept,
            "nominal_kept": self.nominal_kept,
            "drop_budget": self.drop_budget,
            "dropped_infeasible": self.dropped_infeasible,
            "dropped_trimmed": self.dropped_trimmed,
            "sigma": [int(s) for s in self.sigma],
            "r_dom": self.r_dom,
            "s_mesh": self.s_mesh,
            "erosion": self.erosion,
            "gain": self.gain,
            "beta": self.beta,
            "floor": self.floor,
            "delta": self.delta,
            "mean_cost": self.mean_cost,
            "disjoint_margin": self.disjoint_margin,
            "warnings": list(self.warnings),
        }


def _blend(rho):
    if rho <= 1.0:
        return 1.0
    if rho >= BLEND_EDGE:
        return 0.0
    q = (BLEND_EDGE - rho) / (BLEND_EDGE - 1.0)
    return q * q * q * (q * (6.0 * q - 15.0) + 10.0)


@dataclass
class ControlField:
    """Packed tube windows plus the data needed to evaluate them."""
    dim: int
    dt: float
    n_steps: int
    region: object
    field: VectorField
    w_kon: np.ndarray
    w_koff: np.ndarray
    w_kshrink: np.ndarray  # step where the exponential shrink clock starts
    w_poff: np.ndarray
    w_npts: np.ndarray
    w_h: np.ndarray
    w_beta: np.ndarray
    w_floor: np.ndarray
    w_gain: np.ndarray
    w_path: np.ndarray
    w_vel: np.ndarray
    bound: float = 0.0
    meta: dict = dataclass_field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return int(self.w_kon.shape[0])

    def packed(self) -> dict:
        """Window arrays in the layout the integrator kernels expect."""
        return dict(w_kon=self.w_kon, w_koff=self.w_koff,
                    w_kshrink=self.w_kshrink, w_poff=self.w_poff,
                    w_npts=self.w_npts, w_h=self.w_h, w_beta=self.w_beta,
                    w_floor=self.w_floor, w_gain=self.w_gain,
                    w_path=self.w_path, w_vel=self.w_vel)

    def active_lists(self):
        return build_active_lists(self.w_kon, self.w_koff, self.n_steps)

    def window_center(self, w: int, t: float) -> np.ndarray:
        """Center path of window w at time t (linear between grid samples)."""
        base = int(self.w_poff[w])
        last = int(self.w_npts[w]) - 1
        f = t / self.dt - float(self.w_kon[w])
        i0 = min(max(int(math.floor(f + 1e-9)), 0), last)
        i1 = min(i0 + 1, last)
        frac = min(max(f - i0, 0.0), 1.0)
        return (1.0 - frac) * self.w_path[base + i0] + frac * self.w_path[base + i1]

    def window_halfwidth(self, w: int, t: float, center=None) -> np.ndarray:
        """Effective tube halfwidth of window w at time t (shrink and
        boundary clip applied); the blend support extends BLEND_EDGE times
        this far."""
        tloc = max(0.0, t - float(self.w_kshrink[w]) * self.dt)
        shrink = max(float(self.w_floor[w]),
                     math.exp(-float(self.w_beta[w]) * tloc))
        c = self.window_center(w, t) if center is None else center
        kind, params, margin = self.region.pack()
        sdc = float(np_sd(kind, params, margin, c[None, :])[0])
        h = self.w_h[w] * shrink
        corner = BLEND_EDGE * float(np.linalg.norm(h))
        lam = 1.0 if corner <= sdc else max(sdc, 0.0) / corner
        return h * lam

    def evaluate(self, x, t: float):
        """Control velocity at (x, t); x a point or an (m, d) batch.

        Mirrors the integrator kernel exactly: zero outside the region, and
        the active window with the smallest scaled center distance captures
        (ties going to the earliest packed window).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        u = np.zeros_like(pts)
        if self.n_windows == 0:
            return u[0] if single else u
        kind, params, margin = self.region.pack()
        inside = np_sd(kind, params, margin, pts) > 0.0
        if not inside.any():
            return u[0] if single else u
        ton = self.w_kon * self.dt
        toff = self.w_koff * self.dt
        act = np.nonzero((ton <= t + 1e-12) & (t <= toff + 1e-12))[0]
        if act.size == 0:
            return u[0] if single else u
        v = self.field.evaluate(pts)
        best_rho = np.where(inside, BLEND_EDGE, -1.0)
        best_w = np.full(pts.shape[0], -1, dtype=np.int64)
        cache = {}
        for w in act:
            tloc = max(0.0, t - float(self.w_kshrink[w]) * self.dt)
            shrink = max(float(self.w_floor[w]),
                         math.exp(-float(self.w_beta[w]) * tloc))
            base = int(self.w_poff[w])
            last = int(self.w_npts[w]) - 1
            f = t / self.dt - float(self.w_kon[w])
            i0 = min(max(int(math.floor(f + 1e-9)), 0), last)
            i1 = min(i0 + 1, last)
            frac = min(max(f - i0, 0.0), 1.0)
            c = (1.0 - frac) * self.w_path[base + i0] + frac * self.w_path[base + i1]
            sdc = float(np_sd(kind, params, margin, c[None, :])[0])
            if sdc <= 0.0:
                continue
            h = self.w_h[w] * shrink
            corner = BLEND_EDGE * float(np.linalg.norm(h))
            lam = 1.0 if corner <= sdc else sdc / corner
            # feedforward is constant on each path segment
            ff = self.w_vel[base + min(i0, max(last - 1, 0))]
            cache[int(w)] = (c, lam * h, ff)
            rho = (np.abs(pts - c) / (lam * h)).max(axis=1)
            upd = inside & (rho < best_rho)
            best_rho[upd] = rho[upd]
            best_w[upd] = w
        for w, (c, lh, ff) in cache.items():
            rows = np.nonzero(best_w == w)[0]
            if rows.size == 0:
                continue
            s = np.array([_blend(r) for r in best_rho[rows]])
            u[rows] = s[:, None] * (ff + self.w_gain[w] * (c - pts[rows])
                                    - v[rows])
        return u[0] if single else u

    def to_json(self, path, knot_stride: int | None = None):
        """Write a replayable description; center paths are downsampled to
        knots (phase joints kept exact) and re-interpolated on load."""
        stride = knot_stride or max(1, int(round(0.01 / self.dt)))
        joints = self.meta.get("joints")
        windows = []
        for w in range(self.n_windows):
            base = int(self.w_poff[w])
            npts = int(self.w_npts[w])
            ks = set(range(0, npts, stride))
            ks.add(npts - 1)
            if joints is not None:
                ks.update(int(j) for j in joints[w] if 0 <= j < npts)
            ks = sorted(ks)
            windows.append({
                "kon": int(self.w_kon[w]),
                "koff": int(self.w_koff[w]),
                "kshrink": int(self.w_kshrink[w]),
                "gain": float(self.w_gain[w]),
                "beta": float(self.w_beta[w]),
                "floor": float(self.w_floor[w]),
                "h": [float(a) for a in self.w_h[w]],
                "knots": ks,
                "path": [[float(a) for a in self.w_path[base + k]] for k in ks],
                "vel": [[float(a) for a in self.w_vel[base + k]] for k in ks],
            })
        doc = {
            "kind": "tube-control",
            "dim": self.dim,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "bound": self.bound,
            "field": self.field.source,
            "region": self.region.to_dict(),
            "meta": {k: v for k, v in self.meta.items() if k != "joints"},
            "windows": windows,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "ControlField":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "tube-control":
            raise ValueError("not a tube-control document")
        d = int(doc["dim"])
        dt = float(doc["dt"])
        region = region_from_dict(doc["region"])
        fld = VectorField(doc["field"], d)
        wins = doc["windows"]
        m = len(wins)
        if m == 0:
            w = empty_windows(d)
            return cls(dim=d, dt=dt, n_steps=int(doc["n_steps"]),
                       region=region, field=fld, bound=float(doc["bound"]),
                       meta=doc.get("meta", {}), **w)
        kon = np.array([w["kon"] for w in wins], dtype=np.int64)
        koff = np.array([w["koff"] for w in wins], dtype=np.int64)
        kshrink = np.array([w.get("kshrink", w["kon"]) for w in wins],
                           dtype=np.int64)
        npts = koff - kon + 1
        poff = np.concatenate([[0], np.cumsum(npts[:-1])]).astype(np.int64)
        total = int(npts.sum())
        path = np.empty((total, d))
        vel = np.empty((total, d))
        for w, win in enumerate(wins):
            ks = np.asarray(win["knots"], dtype=np.float64)
            p = np.asarray(win["path"], dtype=np.float64)
            rel = np.arange(npts[w], dtype=np.float64)
            for j in range(d):
                path[poff[w]:poff[w] + npts[w], j] = np.interp(rel, ks, p[:, j])
            # feedforward is re-derived from the path so each row carries the
            # exact slope of its segment
            vel[poff[w]:poff[w] + npts[w]] = _segment_slopes(
                path[poff[w]:poff[w] + npts[w]], dt)
        return cls(
            dim=d, dt=dt, n_steps=int(doc["n_steps"]), region=region,
            field=fld, w_kon=kon, w_koff=koff, w_kshrink=kshrink,
            w_poff=poff, w_npts=npts,
            w_h=np.array([w["h"] for w in wins], dtype=np.float64),
            w_beta=np.array([w["beta"] for w in wins], dtype=np.float64),
            w_floor=np.array([w["floor"] for w in wins], dtype=np.float64),
            w_gain=np.array([w["gain"] for w in wins], dtype=np.float64),
            w_path=path, w_vel=vel, bound=float(doc["bound"]),
            meta=doc.get("meta", {}))


def evaluate_control(cf: ControlField, x, t: float):
    """Control velocity at (x, t): zero outside the region, feedforward plus
    feedback inside the active tube, quintic blend in between."""
    return cf.evaluate(x, t)


# ---------------------------------------------------------------------------
# shared synthesis helpers
# ---------------------------------------------------------------------------

def _interior_steps(paths, region, t_arr, de, dt, need=None, k_lim=None):
    """Grid steps s/dt with the flow sample strictly inside the region.

    Prefers the step just past t + de/6 and advances toward t + de/3 until
    the signed distance is positive; falls back to the best candidate.
    With `need` given, keeps advancing (up to k_lim) until the signed
    distance reaches need[i], so a full-size capture box fits around the
    sample; if the path never gets that deep, takes its deepest point.
    """
    kind, params, margin = region.pack()
    kmax_path = paths.shape[0] - 1
    out = np.empty(t_arr.shape[0], dtype=np.int64)
    for i, t in enumerate(t_arr):
        klo = min(int(math.floor((t + de / 6.0) / dt)) + 1, kmax_path)
        khi = min(max(int(math.floor((t + de / 3.0) / dt)), klo), kmax_path)
        if k_lim is not None:
            khi = min(max(int(k_lim[i]), khi), kmax_path)
        sd = np_sd(kind, params, margin, paths[klo:khi + 1, i])
        if need is not None:
            deep = np.nonzero(sd >= need[i])[0]
            if deep.size:
                out[i] = klo + int(deep[0])
            else:
                out[i] = klo + int(np.argmax(sd))
            continue
        good = np.nonzero(sd > _SD_TOL)[0]
        out[i] = klo + (int(good[0]) if good.size else int(np.argmax(sd)))
    return out


def _straight_rows(y0, y1, n_rows):
    t = np.linspace(0.0, 1.0, n_rows)[:, None]
    return (1.0 - t) * y0[None, :] + t * y1[None, :]


def _leg_clearance(region, fwd, bwd, t0, t1, ks0, ks1, sigma, y0, s0, y1,
                   s1, T, dt):
    """Per-plan clearance between each transit segment and every OTHER
    atom's free in-region flight legs (entry leg before capture, exit leg
    after release), measured at shared times.

    A tube wider than this would deflect a passing free atom; plan m's
    support radius must stay below half of clearance[m].
    """
    kind, params, margin = region.pack()
    n = ks0.shape[0]
    owners, pts, taus = [], [], []
    for i in range(n):
        j = int(sigma[i])
        ka = int(math.ceil(t0[i] / dt - 1e-9))
        for k in range(ka, int(ks0[i]) + 1):
            owners.append(i)
            pts.append(fwd[k, i])
            taus.append(k * dt)
        kb = int(math.ceil(t1[j] / dt - 1e-9))
        for k in range(kb, int(ks1[j]) + 1):
            owners.append(i)
            pts.append(bwd[k, j])
            taus.append(T - k * dt)
    if not pts:
        return np.full(n, np.inf)
    owners = np.asarray(owners, dtype=np.int64)
    pts = np.asarray(pts)
    taus = np.asarray(taus)
    keep = np_sd(kind, params, margin, pts) > 0.0
    owners, pts, taus = owners[keep], pts[keep], taus[keep]
    out = np.full(n, np.inf)
    for m in range(n):
        jm = int(sigma[m])
        e_m = T - s1[jm]
        sel = (owners != m) & (taus >= s0[m]) & (taus <= e_m)
        if not sel.any():
            continue
        frac = (taus[sel] - s0[m]) / (e_m - s0[m])
        seg = y0[m] + frac[:, None] * (y1[jm] - y0[m])
        out[m] = float(np.linalg.norm(pts[sel] - seg, axis=1).min())
    return out


def _segment_slopes(path, dt):
    """Per-row feedforward: the exact slope of the path segment starting at
    each row.  Constant-slope feedforward makes the RK4 step land a tracked
    atom exactly on the next path node, so phase joints impart no kick."""
    vel = np.empty_like(path)
    if path.shape[0] > 1:
        vel[:-1] = np.diff(path, axis=0) / dt
        vel[-1] = vel[-2]
    else:
        vel[:] = 0.0
    return vel


def _pack_windows(parts, dt, order=None):
    """Concatenate per-window pieces; each part is a dict with scalars and
    an (npts, d) path block.  Returns packed arrays sorted by `order`."""
    if order is None:
        order = np.arange(len(parts))
    kon = np.array([parts[i]["kon"] for i in order], dtype=np.int64)
    koff = np.array([parts[i]["koff"] for i in order], dtype=np.int64)
    kshrink = np.array([parts[i].get("kshrink", parts[i]["kon"])
                        for i in order], dtype=np.int64)
    npts = np.array([parts[i]["path"].shape[0] for i in order], dtype=np.int64)
    poff = np.concatenate([[0], np.cumsum(npts[:-1])]).astype(np.int64)
    d = parts[0]["path"].shape[1]
    return dict(
        w_kon=kon, w_koff=koff, w_kshrink=kshrink, w_poff=poff, w_npts=npts,
        w_h=np.array([parts[i]["h"] for i in order], dtype=np.float64),
        w_beta=np.array([parts[i]["beta"] for i in order], dtype=np.float64),
        w_floor=np.array([parts[i]["floor"] for i in order], dtype=np.float64),
        w_gain=np.array([parts[i]["gain"] for i in order], dtype=np.float64),
        w_path=np.ascontiguousarray(np.concatenate([parts[i]["path"] for i in order]))
        if len(parts) else np.zeros((1, d)),
        w_vel=np.ascontiguousarray(np.concatenate(
            [_segment_slopes(parts[i]["path"], dt) for i in order]))
        if len(parts) else np.zeros((1, d)),
    )


def _control_bound(field, region, windows) -> float:
    lo, hi = region.bbox()
    vmax = field.speed_bound(lo, hi)
    best = 0.0
    m = windows["w_kon"].shape[0]
    for w in range(m):
        base = windows["w_poff"][w]
        npts = windows["w_npts"][w]
        ffmax = float(np.linalg.norm(
            windows["w_vel"][base:base + npts], axis=1).max())
        reach = BLEND_EDGE * float(np.linalg.norm(windows["w_h"][w]))
        best = max(best, ffmax + float(windows["w_gain"][w]) * reach + vmax)
    return best


def _tube_clearance(windows, region, dt, horizon_steps, skip_factor=3.0,
                    n_times=360, groups=None):
    """Smallest gap between active tube boxes over sampled shared times.

    Negative values mean every sampled pair of tubes is separated by at
    least that margin; positive means two boxes overlap.  Each window's
    capture phase plus shrink transient (skip_factor / beta past the shrink
    start) is excluded: until the shrink has bitten, neighboring blends are
    allowed to overlap and the closest-center rule arbitrates.  Windows
    sharing a group id (tubes delivering to the same target ride the same
    exit path on purpose) are never counted against each other.
    """
    kind, params, margin = region.pack()
    m = windows["w_kon"].shape[0]
    if m < 2:
        return -np.inf
    kon = windows["w_kon"]
    koff = windows["w_koff"]
    kshrink = windows["w_kshrink"]
    beta = windows["w_beta"]
    skip = np.where(beta > 0.0, skip_factor / np.maximum(beta, 1e-30), 0.0)
    t_on = kshrink * dt + skip
    t_off = koff * dt
    worst = -np.inf
    for t in np.linspace(0.0, horizon_steps * dt, n_times):
        act = np.nonzero((t_on <= t) & (t <= t_off))[0]
        if act.size < 2:
            continue
        centers = np.empty((act.size, windows["w_h"].shape[1]))
        halfw = np.empty_like(centers)
        for a, w in enumerate(act):
            base = int(windows["w_poff"][w])
            last = int(windows["w_npts"][w]) - 1
            f = t / dt - float(kon[w])
            i0 = min(max(int(math.floor(f + 1e-9)), 0), last)
            i1 = min(i0 + 1, last)
            frac = min(max(f - i0, 0.0), 1.0)
            centers[a] = ((1.0 - frac) * windows["w_path"][base + i0]
                          + frac * windows["w_path"][base + i1])
            shrink = max(float(windows["w_floor"][w]),
                         math.exp(-float(beta[w]) * (t - kshrink[w] * dt)))
            halfw[a] = windows["w_h"][w] * shrink
        sdc = np_sd(kind, params, margin, centers)
        corner = BLEND_EDGE * np.linalg.norm(halfw, axis=1)
        lam = np.minimum(1.0, np.maximum(sdc, 0.0) / np.maximum(corner, 1e-300))
        halfw *= BLEND_EDGE * lam[:, None]  # blend support, box included
        gap = np.abs(centers[:, None, :] - centers[None, :, :]) \
            - (halfw[:, None, :] + halfw[None, :, :])
        pair_gap = gap.max(axis=2)  # separated if ANY axis has a gap
        np.fill_diagonal(pair_gap, np.inf)
        if groups is not None:
            ga = groups[act]
            pair_gap[ga[:, None] == ga[None, :]] = np.inf
        worst = max(worst, float(-pair_gap.min()))
    return worst


# ---------------------------------------------------------------------------
# microscopic synthesis: one tube per atom
# ---------------------------------------------------------------------------

def synthesize_micro(X0, X1, T: float, delta: float, field, region,
                     config: FlowConfig | None = None):
    """Explicit control steering each atom of X0 onto an atom of X1 by T.

    Atoms free-fly into the region, ride a straight constant-velocity tube
    to their matched exit point, and free-fly onto the target.  Returns
    (plans, ControlField).
    """
    cfg = config or FlowConfig()
    dt = cfg.dt
    x0 = np.atleast_2d(np.asarray(getattr(X0, "positions", X0), dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(getattr(X1, "positions", X1), dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError("source and target atom counts differ")
    n, d = x0.shape
    t0, _ = entry_times(field, region, x0, "forward", config=cfg)
    t1, _ = entry_times(field, region, x1, "backward", config=cfg)
    if not (np.isfinite(t0).all() and np.isfinite(t1).all()):
        bad0 = np.nonzero(~np.isfinite(t0))[0]
        bad1 = np.nonzero(~np.isfinite(t1))[0]
        raise GeometricConditionError(
            "some atoms never reach the control region",
            violating0=bad0, violating1=bad1)
    m_e = minmax_pairing_time(t0, t1)
    if T <= m_e + 2.0 * dt:
        raise InfeasibleTimeError(
            f"horizon T={T:g} is not above the minimal pairing time "
            f"M_e={m_e:.6g} (plus grid margin)", required=m_e)
    de = min(delta, T - m_e)
    if de < 12.0 * dt:
        raise InfeasibleTimeError(
            f"slack {de:g} below the 12*dt grid resolution; reduce dt",
            required=m_e + 12.0 * dt)

    k_fwd = int(math.floor((float(t0.max()) + de / 3.0) / dt)) + 1
    k_bwd = int(math.floor((float(t1.max()) + de / 3.0) / dt)) + 1
    fwd = sample_paths(field, x0, k_fwd, dt, sign=1.0)
    bwd = sample_paths(field, x1, k_bwd, dt, sign=-1.0)
    ks0 = _interior_steps(fwd, region, t0, de, dt)
    ks1 = _interior_steps(bwd, region, t1, de, dt)
    s0 = ks0 * dt
    s1 = ks1 * dt
    y0 = fwd[ks0, np.arange(n)]
    y1 = bwd[ks1, np.arange(n)]

    cost = transport_cost_matrix(y0, s0, y1, T - s1)
    cost[(T - s1)[None, :] - s0[:, None] < 6.0 * dt - 1e-12] = np.inf
    try:
        asg = solve_min_sum(cost)
    except ValueError as exc:
        raise InfeasibleTimeError(
            f"no feasible transit schedule at T={T:g}: {exc}",
            required=m_e) from exc
    sigma = asg.sigma

    sep = pair_separation(y0, s0, y1, T - s1, sigma=sigma)
    if sep < 1e-6:
        worst, pair = np.inf, (0, 0)
        for i in range(n):
            for j in range(i + 1, n):
                idx = [i, j]
                dij = pair_separation(y0[idx], s0[idx], y1[sigma[idx]],
                                      (T - s1)[sigma[idx]])
                if dij < worst:
                    worst, pair = dij, (i, j)
        raise SeparationError(
            f"transit tubes for atoms {pair[0]} and {pair[1]} are only "
            f"{worst:.3g} apart", pair=pair)

    kind, params, margin = region.pack()
    sd_ends = np.minimum(np_sd(kind, params, margin, y0),
                         np_sd(kind, params, margin, y1[sigma]))
    # sd is concave inside a convex region, so segment clearance is attained
    # at an endpoint
    legs = _leg_clearance(region, fwd, bwd, t0, t1, ks0, ks1, sigma,
                          y0, s0, y1, s1, T, dt)
    plans = []
    parts = []
    kT = int(round(T / dt))
    for i in range(n):
        j = int(sigma[i])
        kon = int(ks0[i])
        koff = kT - int(ks1[j])
        npts = koff - kon + 1
        R = min(sep / 3.0, 0.9 * float(sd_ends[i]), 0.5 * float(legs[i]))
        r = 0.5 * R
        if r <= 0.0:
            raise SeparationError(
                f"no room for a tube around atom {i}: clearance "
                f"{sd_ends[i]:.3g}", pair=(i, j))
        path = _straight_rows(y0[i], y1[j], npts)
        plans.append(AgentPlan(
            source=x0[i].copy(), target=x1[j].copy(), t0=float(t0[i]),
            t1=float(t1[j]), s0=float(s0[i]), s1=float(s1[j]),
            y0=y0[i].copy(), y1=y1[j].copy(), r=float(r), R=float(R),
            pair=j))
        parts.append(dict(
            kon=kon, koff=koff, kshrink=kon, h=np.full(d, r / math.sqrt(d)),
            beta=0.0, floor=1.0, gain=0.0, path=path))
    order = np.lexsort((np.arange(n), np.array([p["kon"] for p in parts])))
    windows = _pack_windows(parts, dt, order)
    joints = [[0, int(windows["w_npts"][w]) - 1]
              for w in range(len(parts))]
    cf = ControlField(
        dim=d, dt=dt, n_steps=kT, region=region, field=field,
        bound=_control_bound(field, region, windows),
        meta={"mode": "atoms", "m_e": float(m_e), "delta": float(de),
              "separation": float(sep), "joints": joints},
        **windows)
    plans = [plans[i] for i in order]
    return plans, cf


# ---------------------------------------------------------------------------
# macroscopic synthesis: one tube per mesh cell
# ---------------------------------------------------------------------------

def _partial_pairing(cost, budget):
    """Min-cost pairing dropping infeasible pairs plus up to `budget` of the
    costliest matches.  Returns (sigma over rows, kept row indices sorted by
    descending cost of their match)."""
    from scipy.optimize import linear_sum_assignment

    m0, m1 = cost.shape
    finite = np.isfinite(cost)
    # one forbidden match must outweigh any all-finite matching total, so
    # the solver only uses them when structurally forced
    big = (cost[finite].sum() if finite.any() else 1.0) + 1.0
    work = np.where(finite, cost, big)
    rows, cols = linear_sum_assignment(work)
    sigma = np.full(m0, -1, dtype=np.int64)
    good = finite[rows, cols]
    sigma[rows[good]] = cols[good]
    dropped_infeasible = int((~good).sum())
    kept = np.nonzero(sigma >= 0)[0]
    if budget > 0 and kept.size:
        kept_cost = cost[kept, sigma[kept]]
        order = np.argsort(kept_cost, kind="stable")[::-1]
        cut = kept[order[:min(budget, kept.size)]]
        sigma[cut] = -1
        trimmed = int(cut.size)
    else:
        trimmed = 0
    return sigma, dropped_infeasible, trimmed


def _contraction_rate(g, dt):
    """Per-time contraction rate the integrator actually delivers for the
    feedback pull xi' = -g*xi.  For small g*dt this is g itself; near the
    RK4 stability edge the step amplification R(-g*dt) contracts much slower
    than exp(-g*dt), and the tube shrink must not outrun it."""
    z = -g * dt
    r = abs(1.0 + z + z * z / 2.0 + z ** 3 / 6.0 + z ** 4 / 24.0)
    if r <= 1e-12:
        return 25.0 / dt
    return min(g, -math.log(r) / dt)


def _sliver_targets(mesh, n_slots):
    """Stand-in delivery points for target mass the mesh discarded.

    Columns are carved from each grid square left to right, so whatever a
    square held beyond its last full column is an uncovered strip at the
    square's right edge.  Returns up to n_slots points spread over those
    strips, apportioned by estimated strip mass (strip width times the
    linear mass density of the square's last kept column).  Squares that
    kept no cells at all are skipped: an empty square is indistinguishable
    from a hole in the density, and aiming mass at a hole costs more than
    leaving the surplus to free-fly.
    """
    n, d = mesh.n, mesh.dim
    col_mass = mesh.gamma / n ** 3
    edges_x = np.linspace(mesh.bbox_lo[0], mesh.bbox_hi[0], n + 1)
    squares = {}
    for c in mesh.cells:
        squares.setdefault(c.index[0], []).append(c)
    strips = []
    for k, cells in squares.items():
        kx = k % n if d == 2 else k
        sq_hi = float(edges_x[kx + 1])
        x_cut = max(float(c.outer_hi[0]) for c in cells)
        width = sq_hi - x_cut
        if width <= 1e-9 * (edges_x[1] - edges_x[0]):
            continue
        last_i = max(c.index[1] for c in cells)
        last = [c for c in cells if c.index[1] == last_i]
        w_last = max(float(c.outer_hi[0]) for c in last) \
            - min(float(c.outer_lo[0]) for c in last)
        est = col_mass * width / max(w_last, 1e-12)
        ys = np.sort([0.5 * (c.outer_lo[-1] + c.outer_hi[-1]) for c in last])
        strips.append((est, x_cut, sq_hi, ys))
    if not strips or n_slots <= 0:
        return np.empty((0, d))
    w = np.array([s[0] for s in strips])
    share = n_slots * w / w.sum()
    counts = np.floor(share).astype(int)
    rem = np.argsort(share - counts)[::-1]
    for i in rem[:n_slots - counts.sum()]:
        counts[i] += 1
    pts = []
    for (est, xa, xb, ys), c in zip(strips, counts):
        if c == 0:
            continue
        if d == 1:
            pts.extend([[xa + (xb - xa) * (j + 0.5) / c] for j in range(c)])
            continue
        # spread slots over the strip's rows, using the last column's row
        # centers as the template for where the square's mass sits in y
        q = np.linspace(0.0, 1.0, c + 2)[1:-1]
        yq = np.interp(q, np.linspace(0.0, 1.0, ys.size), ys) \
            if ys.size > 1 else np.full(c, ys[0])
        xm = 0.5 * (xa + xb)
        pts.extend([[xm, float(y)] for y in yq])
    return np.array(pts, dtype=np.float64)


def _mesh_pairing_time(t0, t1, fin0, fin1):
    """Feasibility threshold of the best pairing between the finite entry
    times, dropping the latest entries on the longer side."""
    if fin0.all() and fin1.all() and t0.shape[0] == t1.shape[0]:
        return float(minmax_pairing_time(t0, t1))
    if fin0.any() and fin1.any():
        k = min(int(fin0.sum()), int(fin1.sum()))
        return float(minmax_pairing_time(np.sort(t0[fin0])[:k],
                                         np.sort(t1[fin1])[:k]))
    return float("inf")


def synthesize_macro(mesh0, mesh1, T: float, epsilon: float, field, region,
                     config: FlowConfig | None = None, delta: float | None = None,
                     gain: float | None = None, gain_cap: float | None = None,
                     floor_frac: float = 0.05, best_effort: bool = False):
    """Control delivering mesh0's cell masses onto mesh1's cells by time T.

    Each paired cell gets one window: capture the advected inner box on a
    slightly eroded region, shrink it, carry it along a straight segment,
    then hold it on the target's backward flow until release.  Pairs are
    dropped when infeasible and, beyond that, the costliest matches up to
    the epsilon mass budget; surplus source cells (a finer source mesh)
    are delivered onto the strips the target mesh discarded rather than
    left behind.  best_effort skips the horizon feasibility check
    (everything infeasible is simply dropped).

    Returns (ControlField, PairingReport).
    """
    cfg = config or FlowConfig()
    dt = cfg.dt
    if mesh0.n != mesh1.n:
        raise ValueError(f"mesh parameters differ: {mesh0.n} vs {mesh1.n}")
    if mesh0.dim != mesh1.dim:
        raise ValueError("mesh dimensions differ")
    n = mesh0.n
    d = mesh0.dim
    kT = int(round(T / dt))
    reps0 = mesh0.reps()
    reps1 = mesh1.reps()
    m0, m1 = reps0.shape[0], reps1.shape[0]
    if m0 > m1:
        # finer source mesh: aim the surplus cells at the strips the target
        # mesh discarded instead of letting their mass free-fly
        extra = _sliver_targets(mesh1, m0 - m1)
        if extra.shape[0]:
            reps1 = np.vstack([reps1, extra])
            m1 = reps1.shape[0]
    warnings = []

    # bounding radius of the region's flow over [0, T]
    probes = region.sample_points(32, 32)
    swept = sample_paths(field, probes, kT, dt, sign=1.0)
    r_dom = float(np.linalg.norm(swept.reshape(-1, d), axis=1).max())
    box = 1.05 * r_dom + 1e-9
    lhat = field.lipschitz_bound(np.full(d, -box), np.full(d, box))

    # entry times on an eroded copy so whole tubes fit inside the region;
    # the erosion is halved until every representative reaches the eroded
    # set AND the horizon clears the resulting pairing time (the boundary
    # clip in the kernel keeps tube supports inside the region regardless)
    erosion = min(math.exp(lhat * T) * math.sqrt(2.0) / n,
                  0.45 * region.inradius)
    for _ in range(10):
        region_n = region.eroded(erosion)
        t0, _ = entry_times(field, region_n, reps0, "forward", config=cfg)
        t1, _ = entry_times(field, region_n, reps1, "backward", config=cfg)
        fin0, fin1 = np.isfinite(t0), np.isfinite(t1)
        all_fin = bool(fin0.all() and fin1.all())
        s_mesh = _mesh_pairing_time(t0, t1, fin0, fin1)
        if all_fin and (best_effort or T > s_mesh + 24.0 * dt):
            break
        erosion *= 0.5
    else:
        if not best_effort:
            if not all_fin:
                raise GeometricConditionError(
                    "representative points never reach the eroded region",
                    violating0=np.nonzero(~fin0)[0],
                    violating1=np.nonzero(~fin1)[0])
            raise InfeasibleTimeError(
                f"horizon T={T:g} is not above the mesh steering time "
                f"S={s_mesh:.6g} (plus grid margin)", required=s_mesh)

    # split the horizon slack: a slice for the entry/exit stagger, the rest
    # for riding the flow deep enough that full-size capture boxes fit
    slack = T - s_mesh if np.isfinite(s_mesh) else \
        max(T - float(t0[fin0].max() if fin0.any() else 0.0)
            - float(t1[fin1].max() if fin1.any() else 0.0), 24.0 * dt)
    de = min(delta if delta is not None else 0.2 * slack, 0.2 * slack)
    de = max(de, 12.0 * dt)
    allow = max(0.0, slack - 2.0 * de / 3.0 - 8.0 * dt)

    # capture halfwidth: the advected inner box, clamped so adjacent boxes
    # stay apart (inner boxes sit 2*(outer - inner) from their neighbors)
    cells0 = mesh0.cells
    t0c = np.where(fin0, t0, 0.0)
    t1c = np.where(fin1, t1, 0.0)
    h_caps = np.empty((m0, d))
    for i in range(m0):
        h_in = cells0[i].inner_halfwidth
        h_out = cells0[i].outer_halfwidth
        grow = math.exp(lhat * min(t0c[i] + de / 3.0 + allow, T))
        h_caps[i] = np.minimum(h_in * grow,
                               h_in + 0.8 * (h_out - h_in))
    need = 1.05 * BLEND_EDGE * np.linalg.norm(h_caps, axis=1)

    # feedback gain from the contraction bound (the clearance loop below
    # may raise it, which only speeds up the scheduled transients)
    base_gain = max(2.0 * math.exp(lhat * T), 32.0, 30.0 / de, 2.5 * lhat)
    cap = min(1e6, 2.0 / dt)
    if gain_cap is not None:
        cap = min(cap, gain_cap)
    g = min(gain if gain is not None else base_gain, cap)
    rate0 = _contraction_rate(g, dt)
    beta0 = 0.6 * rate0
    # steps to gather a cell once its box is full size, then to shrink the
    # support to the floor; launches wait for both so every tube moving
    # across the region is needle-thin
    n_floor = int(math.ceil(math.log(1.0 / floor_frac) / (beta0 * dt)))
    n_gath = np.ceil(np.log(h_caps.max(axis=1)
                            / (0.25 * floor_frac * h_caps.min(axis=1)))
                     / (rate0 * dt)).astype(np.int64)

    # perturbed entry/exit times and gate points
    tmax0 = float(t0[fin0].max()) if fin0.any() else 0.0
    tmax1 = float(t1[fin1].max()) if fin1.any() else 0.0
    k_fwd = min(int(math.floor((tmax0 + de / 3.0 + allow) / dt)) + 2
                + int(n_gath.max()) + n_floor,
                cfg.max_steps)
    k_bwd = min(int(math.floor((tmax1 + de / 3.0) / dt)) + 1, cfg.max_steps)
    fwd = sample_paths(field, reps0, k_fwd, dt, sign=1.0)
    bwd = sample_paths(field, reps1, k_bwd, dt, sign=-1.0)
    k_lim = np.minimum(np.floor((t0c + de / 3.0 + allow) / dt).astype(np.int64),
                       kT - 8)
    ks0 = _interior_steps(fwd, region_n, t0c, de, dt, need=need, k_lim=k_lim)
    ks1 = _interior_steps(bwd, region_n, t1c, de, dt)
    s0 = ks0 * dt
    s1 = ks1 * dt
    y0 = fwd[ks0, np.arange(m0)]
    y1 = bwd[ks1, np.arange(m1)]

    cost = transport_cost_matrix(y0, s0, y1, T - s1)
    pre = (n_gath + n_floor + 8.0) * dt
    cost[(T - s1)[None, :] - s0[:, None] < pre[:, None] - 1e-12] = np.inf
    cost[~fin0, :] = np.inf
    cost[:, ~fin1] = np.inf
    guaranteed = n ** 4 - n ** 3
    budget = int(round(epsilon / (4.0 * r_dom) * guaranteed))
    nominal_kept = int(round((1.0 - epsilon / (4.0 * r_dom)) * guaranteed))
    if np.isfinite(cost).any():
        sigma, dropped_inf, trimmed = _partial_pairing(cost, budget)
    else:
        sigma = np.full(m0, -1, dtype=np.int64)
        dropped_inf, trimmed = min(m0, m1), 0
    kept = np.nonzero(sigma >= 0)[0]
    mean_cost = float(cost[kept, sigma[kept]].mean()) if kept.size else 0.0

    if kept.size == 0:
        windows = empty_windows(d)
        report = PairingReport(
            kept=0, nominal_kept=nominal_kept, drop_budget=budget,
            dropped_infeasible=dropped_inf, dropped_trimmed=trimmed,
            sigma=sigma, r_dom=r_dom, s_mesh=s_mesh, erosion=erosion,
            gain=0.0, beta=0.0, floor=floor_frac, delta=float(de),
            mean_cost=mean_cost, disjoint_margin=-np.inf, warnings=warnings)
        cf = ControlField(dim=d, dt=dt, n_steps=kT, region=region,
                          field=field, bound=0.0,
                          meta={"mode": "mesh", "n": n, "joints": []},
                          **windows)
        return cf, report

    kind_n, params_n, margin_n = region_n.pack()
    sd_fwd = np_sd(kind_n, params_n, margin_n,
                   fwd.reshape(-1, d)).reshape(fwd.shape[0], m0)

    parts = []
    for i in kept:
        j = int(sigma[i])
        kon = int(math.ceil(t0c[i] / dt - 1e-9))
        koff = int(math.floor((T - t1c[j]) / dt + 1e-9))
        k_arr = kT - int(ks1[j])
        kin = int(ks0[i])
        # launch once gathered and shrunk, but not past the point where
        # the forward flow would carry the shrunk tube back out
        thin = 1.1 * BLEND_EDGE * floor_frac * float(np.linalg.norm(h_caps[i]))
        khi = min(k_arr - 8, fwd.shape[0] - 1)
        ok = sd_fwd[kin:khi + 1, i] >= thin
        lim_in = kin + (ok.size - 1 if ok.all() else int(np.argmin(ok)) - 1)
        kL = min(kin + int(n_gath[i]) + n_floor, k_arr - 8, max(lim_in, kin))
        kL = max(kL, kin)
        kshr = max(kon + 1, kin, min(kin + int(n_gath[i]), kL - n_floor))
        npts = koff - kon + 1
        rows1 = fwd[kon:kL, i]
        straight = _straight_rows(fwd[kL, i], y1[j], k_arr - kL + 1)
        jlo = kT - koff
        jhi = int(ks1[j])
        rows3 = bwd[jlo:jhi, j][::-1]
        path = np.concatenate([rows1, straight, rows3])
        assert path.shape[0] == npts
        parts.append(dict(kon=kon, koff=koff, kshrink=kshr,
                          h=h_caps[i], beta=0.0, floor=floor_frac,
                          gain=0.0, path=path, src=int(i),
                          joint=(kL - kon, k_arr - kon)))

    order = np.lexsort((np.array([p["src"] for p in parts]),
                        np.array([p["kon"] for p in parts])))
    groups = np.array([int(sigma[parts[i]["src"]]) for i in order])

    # double the gain until the shrunk tubes are pairwise disjoint after
    # their capture transients
    floor = floor_frac
    windows = None
    margin_best = np.inf
    for attempt in range(6):
        beta = 0.6 * _contraction_rate(g, dt)
        for p in parts:
            p["beta"] = beta
            p["floor"] = floor
            p["gain"] = g
        windows = _pack_windows(parts, dt, order)
        margin_best = _tube_clearance(windows, region, dt, kT, groups=groups)
        if margin_best <= 0.0:
            break
        if attempt % 2 == 0 and g < cap:
            g = min(2.0 * g, cap)
        else:
            floor = max(floor * 0.5, 1e-3)
    if margin_best > 0.0:
        warnings.append(
            f"tube overlap of {margin_best:.3g} remains at gain cap {cap:g}")

    joints_rel = [list(parts[i]["joint"]) for i in order]
    report = PairingReport(
        kept=int(kept.size), nominal_kept=nominal_kept, drop_budget=budget,
        dropped_infeasible=dropped_inf, dropped_trimmed=trimmed, sigma=sigma,
        r_dom=r_dom, s_mesh=s_mesh, erosion=erosion, gain=float(g),
        beta=float(beta), floor=float(floor), delta=float(de),
        mean_cost=mean_cost, disjoint_margin=float(margin_best),
        warnings=warnings)
    cf = ControlField(
        dim=d, dt=dt, n_steps=kT, region=region, field=field,
        bound=_control_bound(field, region, windows),
        meta={"mode": "mesh", "n": n, "s_mesh": _float_or_str(s_mesh),
              "gain": float(g), "delta": float(de), "joints": joints_rel},
        **windows)
    return cf, report


def _float_or_str(x):
    return float(x) if np.isfinite(x) else "inf"
