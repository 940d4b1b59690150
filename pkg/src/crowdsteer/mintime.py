"""Infimum steering times, entry-time statistics and the
non-controllability certificate.

Microscopic quantities pair n source atoms with n target atoms through
sorted entry times; macroscopic ones work with mass-entry profiles F, B and
their generalized inverses.  Both views agree on empirical measures, which
is tested property-style elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .evoluted import EvolutedArchive
from .flow import FlowConfig, entry_times


class GeometricConditionError(RuntimeError):
    """Some atom never crosses the control region within the horizon."""

    def __init__(self, message, violating0=None, violating1=None):
        super().__init__(message)
        self.violating0 = violating0 if violating0 is not None else []
        self.violating1 = violating1 if violating1 is not None else []


class CertificateNotApplicableError(RuntimeError):
    """Certificate theory needs T > S*."""

    def __init__(self, T, s_star):
        super().__init__(
            f"certificate requires T > S*; got T={T:g}, S*={s_star:g}")
        self.T = T
        self.s_star = s_star


# ---------------------------------------------------------------------------
# entry times
# ---------------------------------------------------------------------------

def entry_time(field, omega, x, direction: str = "forward",
               closure: str = "open",
               config: FlowConfig | None = None) -> float:
    """Infimum time for the flow from x to reach omega (open or closed)."""
    if closure not in ("open", "closed"):
        raise ValueError("closure must be 'open' or 'closed'")
    t, _ = entry_times(field, omega, np.asarray(x, dtype=np.float64),
                       direction=direction, closed=(closure == "closed"),
                       config=config)
    return t


@dataclass
class EntryTimes:
    """All four per-atom entry time families for a source/target pair.

    t0: forward times of the source atoms into open omega; t1: backward
    times of the target atoms; the bar variants use the closure.  A
    tangency flag marks atoms whose open and closed times differ by more
    than the refinement tolerance but less than 10*dt, where the open/closed
    distinction is numerically fragile.
    """

    t0: np.ndarray
    t1: np.ndarray
    t0_bar: np.ndarray
    t1_bar: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    tangency0: np.ndarray
    tangency1: np.ndarray
    dt: float
    horizon: float

    @classmethod
    def compute(cls, field, omega, cloud0, cloud1,
                config: FlowConfig | None = None) -> "EntryTimes":
        config = config or FlowConfig()
        t0, g0 = entry_times(field, omega, cloud0.positions, "forward",
                             False, config)
        t0b, g0b = entry_times(field, omega, cloud0.positions, "forward",
                               True, config)
        t1, g1 = entry_times(field, omega, cloud1.positions, "backward",
                             False, config)
        t1b, g1b = entry_times(field, omega, cloud1.positions, "backward",
                               True, config)
        # closed entry can only be earlier; clamp away refinement jitter
        t0b = np.minimum(t0b, t0)
        t1b = np.minimum(t1b, t1)
        tol = 10.0 * config.dt
        tan0 = (t0 - t0b > config.dt * config.refine_frac) & \
               ((t0 - t0b < tol) | g0 | g0b)
        tan1 = (t1 - t1b > config.dt * config.refine_frac) & \
               ((t1 - t1b < tol) | g1 | g1b)
        return cls(t0=t0, t1=t1, t0_bar=t0b, t1_bar=t1b,
                   w0=cloud0.weights.copy(), w1=cloud1.weights.copy(),
                   tangency0=tan0, tangency1=tan1, dt=config.dt,
                   horizon=config.horizon)


@dataclass
class GeometricReport:
    passes: bool
    violating0: np.ndarray      # source atom indices with t0 = +inf
    violating1: np.ndarray      # target atom indices with t1 = +inf
    violating_mass0: float
    violating_mass1: float


def check_geometric_condition(cloud0, cloud1, field, omega,
                              config: FlowConfig | None = None,
                              times: EntryTimes | None = None
                              ) -> GeometricReport:
    """Does every atom cross the control region within the horizon?"""
    if times is None:
        times = EntryTimes.compute(field, omega, cloud0, cloud1, config)
    bad0 = np.nonzero(~np.isfinite(times.t0))[0]
    bad1 = np.nonzero(~np.isfinite(times.t1))[0]
    return GeometricReport(
        passes=(bad0.size == 0 and bad1.size == 0),
        violating0=bad0, violating1=bad1,
        violating_mass0=float(times.w0[bad0].sum()),
        violating_mass1=float(times.w1[bad1].sum()))


# ---------------------------------------------------------------------------
# microscopic infimum times (pure sorted-time formulas)
# ---------------------------------------------------------------------------

def minmax_pairing_time(t0, t1) -> float:
    """max_i of sorted-ascending t0 plus sorted-descending t1.

    This equals the minimum over all pairings of the worst pair sum (the
    exchange argument: any inversion can only lower the max), i.e. the
    smallest horizon T with a feasible schedule t0_i + t1_sigma(i) <= T.
    """
    t0 = np.sort(np.asarray(t0, dtype=np.float64))
    t1 = np.sort(np.asarray(t1, dtype=np.float64))[::-1]
    if t0.shape != t1.shape:
        raise ValueError("need equally many source and target times")
    if t0.size == 0:
        return 0.0
    return float(np.max(t0 + t1))


def minmax_pairing_time_drop(t0, t1, drop: int) -> float:
    """Worst kept pair sum when the `drop` worst pairs are discarded:
    max over i <= n-drop of t0_(i) + t1desc_(i+drop)."""
    t0 = np.sort(np.asarray(t0, dtype=np.float64))
    t1 = np.sort(np.asarray(t1, dtype=np.float64))[::-1]
    n = t0.size
    if t1.size != n:
        raise ValueError("need equally many source and target times")
    if drop < 0 or drop >= n:
        raise ValueError("drop must satisfy 0 <= drop < n")
    if drop == 0:
        return float(np.max(t0 + t1)) if n else 0.0
    return float(np.max(t0[:n - drop] + t1[drop:]))


def star_time(t0, t1) -> float:
    """Largest single entry time on either side."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    vals = [v.max() for v in (t0, t1) if v.size]
    return float(max(vals)) if vals else 0.0


def _check_micro_clouds(cloud0, cloud1):
    if cloud0.n != cloud1.n:
        raise ValueError("source and target clouds must have equal atom "
                         "counts for the microscopic problem")
    for name, c in (("source", cloud0), ("target", cloud1)):
        if np.unique(c.positions, axis=0).shape[0] != c.n:
            raise ValueError(f"{name} cloud has coincident atoms")


def _require_finite(times: EntryTimes, which: str):
    bad0 = np.nonzero(~np.isfinite(times.t0))[0]
    t1 = times.t1_bar if which == "closed" else times.t1
    bad1 = np.nonzero(~np.isfinite(t1))[0]
    if bad0.size or bad1.size:
        raise GeometricConditionError(
            f"{bad0.size} source and {bad1.size} target atoms never cross "
            f"the control region within the horizon",
            violating0=bad0, violating1=bad1)


def micro_infimum_exact(cloud0, cloud1, field, omega,
                        config: FlowConfig | None = None,
                        times: EntryTimes | None = None
                        ) -> "InfimumTimeReport":
    """Worst-pair infimum steering time between atom clouds (open omega)."""
    config = config or FlowConfig()
    _check_micro_clouds(cloud0, cloud1)
    if times is None:
        times = EntryTimes.compute(field, omega, cloud0, cloud1, config)
    _require_finite(times, "open")
    return InfimumTimeReport(
        m_e=minmax_pairing_time(times.t0, times.t1),
        m_star_e=star_time(times.t0, times.t1),
        t0_sorted=np.sort(times.t0), t1_sorted=np.sort(times.t1),
        discretization=_disc(cloud0.n, config),
        tangency_sensitive=bool(times.tangency0.any()
                                or times.tangency1.any()))


def micro_infimum_approx(cloud0, cloud1, field, omega,
                         config: FlowConfig | None = None,
                         times: EntryTimes | None = None
                         ) -> "InfimumTimeReport":
    """Same pairing bound with closed-region pickup on the target side."""
    config = config or FlowConfig()
    _check_micro_clouds(cloud0, cloud1)
    if times is None:
        times = EntryTimes.compute(field, omega, cloud0, cloud1, config)
    _require_finite(times, "closed")
    return InfimumTimeReport(
        m_a=minmax_pairing_time(times.t0, times.t1_bar),
        m_star_a=star_time(times.t0, times.t1_bar),
        t0_sorted=np.sort(times.t0), t1_sorted=np.sort(times.t1_bar),
        discretization=_disc(cloud0.n, config),
        tangency_sensitive=bool(times.tangency0.any()
                                or times.tangency1.any()))


def micro_infimum_up_to_mass(cloud0, cloud1, field, omega, eps: float,
                             gamma: float | None = None,
                             config: FlowConfig | None = None,
                             times: EntryTimes | None = None) -> float:
    """Infimum time when a mass eps of the total gamma may be abandoned."""
    config = config or FlowConfig()
    _check_micro_clouds(cloud0, cloud1)
    if times is None:
        times = EntryTimes.compute(field, omega, cloud0, cloud1, config)
    n = cloud0.n
    if gamma is None:
        gamma = cloud0.total_mass
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    drop = int(math.floor(n * eps / gamma))
    if drop >= n:
        raise ValueError("eps discards every atom")
    return minmax_pairing_time_drop(times.t0, times.t1, drop)


# ---------------------------------------------------------------------------
# mass profiles and macroscopic times
# ---------------------------------------------------------------------------

class MassProfile:
    """Right-continuous step function t -> mass entered by time t.

    Atoms that never enter within the horizon are excluded from the steps
    and carried as `violating_mass`; the profile then saturates strictly
    below the total.
    """

    def __init__(self, times, weights, total_mass: float | None = None):
        times = np.asarray(times, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if times.shape != weights.shape or times.ndim != 1:
            raise ValueError("times and weights must be matching 1D arrays")
        total = float(weights.sum()) if total_mass is None else total_mass
        finite = np.isfinite(times)
        times, weights = times[finite], weights[finite]
        order = np.argsort(times, kind="stable")
        self.times = times[order]
        self.cum = np.cumsum(weights[order])
        self.total_mass = total
        self.reachable_mass = float(self.cum[-1]) if self.cum.size else 0.0
        self.violating_mass = self.total_mass - self.reachable_mass

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right")
        cum = np.concatenate([[0.0], self.cum])
        out = cum[idx]
        return float(out) if out.ndim == 0 else out

    @property
    def breakpoints(self) -> np.ndarray:
        return self.times

    @property
    def sup_time(self) -> float:
        """Largest entry time; +inf if some mass never enters."""
        if self.violating_mass > 1e-12 * max(1.0, self.total_mass):
            return np.inf
        return float(self.times[-1]) if self.times.size else 0.0

    def inverse(self, m):
        """Generalized inverse inf{t >= 0 : F(t) >= m}; 0 at m = 0."""
        m = np.asarray(m, dtype=np.float64)
        if np.any(m < -1e-12) or np.any(m > self.total_mass * (1 + 1e-9)
                                        + 1e-12):
            raise ValueError("mass outside [0, total_mass]")
        # tolerate float dust so breakpoint masses map to their own time
        slack = 1e-9 * max(1.0, self.total_mass)
        idx = np.searchsorted(self.cum, m - slack, side="left")
        padded = np.concatenate([self.times, [np.inf]])
        out = np.where(m <= slack, 0.0, padded[idx])
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float) -> "MassProfile":
        p = MassProfile.__new__(MassProfile)
        p.times = self.times.copy()
        p.cum = self.cum * factor
        p.total_mass = self.total_mass * factor
        p.reachable_mass = self.reachable_mass * factor
        p.violating_mass = self.violating_mass * factor
        return p


def mass_profile(cloud, field, omega, direction: str,
                 config: FlowConfig | None = None,
                 times: np.ndarray | None = None) -> MassProfile:
    """Entry-mass profile of a cloud (forward F or backward B)."""
    if times is None:
        times, _ = entry_times(field, omega, cloud.positions, direction,
                               False, config or FlowConfig())
    return MassProfile(times, cloud.weights)


def generalized_inverse(profile: MassProfile, m: float) -> float:
    return profile.inverse(m)


def _sup_candidates(F: MassProfile, B: MassProfile, hi: float,
                    m_grid: int) -> np.ndarray:
    cand = [np.array([0.0, hi])]
    fb = F.cum[F.cum <= hi + 1e-15]
    bb = hi - B.cum
    cand.append(fb)
    cand.append(bb[(bb >= -1e-15) & (bb <= hi + 1e-15)])
    if m_grid > 0:
        cand.append(np.linspace(0.0, hi, m_grid))
    m = np.unique(np.clip(np.concatenate(cand), 0.0, hi))
    mids = 0.5 * (m[:-1] + m[1:])
    return np.unique(np.concatenate([m, mids]))


def macro_infimum(F: MassProfile, B: MassProfile, m_grid: int = 1024,
                  eps: float = 0.0):
    """sup over m in [0, gamma - eps] of F^-1(m) + B^-1(gamma - eps - m).

    Exact for step profiles: the supremum is piecewise constant between
    breakpoint masses of either profile, and every piece (plus both
    endpoints) is evaluated; the uniform m-grid is a redundant safety net.
    Returns (value, argmax mass).
    """
    gamma = F.total_mass
    if abs(B.total_mass - gamma) > 1e-9 * max(1.0, gamma):
        raise ValueError("profiles carry different total masses")
    if eps < -1e-12 or eps > gamma * (1 + 1e-9):
        raise ValueError("eps outside [0, total mass]")
    hi = max(gamma - eps, 0.0)
    m = _sup_candidates(F, B, hi, m_grid)
    vals = F.inverse(m) + B.inverse(hi - m)
    k = int(np.argmax(vals))
    return float(vals[k]), float(m[k])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _disc(n_atoms, config: FlowConfig):
    return {"n_atoms": int(n_atoms), "dt": config.dt,
            "horizon": config.horizon}


def _jsonable(x):
    if x is None:
        return None
    if isinstance(x, float) and not math.isfinite(x):
        return "inf"
    return x


@dataclass
class InfimumTimeReport:
    """Micro and/or macro infimum steering times for one scenario."""

    m_e: float | None = None
    m_a: float | None = None
    m_star_e: float | None = None
    m_star_a: float | None = None
    s: float | None = None
    s_star: float | None = None
    s_eps: list = dc_field(default_factory=list)   # [(eps, value), ...]
    t0_sorted: np.ndarray | None = None
    t1_sorted: np.ndarray | None = None
    discretization: dict = dc_field(default_factory=dict)
    tangency_sensitive: bool = False
    lenient: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "m_e": _jsonable(self.m_e),
            "m_a": _jsonable(self.m_a),
            "m_star_e": _jsonable(self.m_star_e),
            "m_star_a": _jsonable(self.m_star_a),
            "s": _jsonable(self.s),
            "s_star": _jsonable(self.s_star),
            "s_eps": [{"eps": e, "value": _jsonable(v)}
                      for e, v in self.s_eps],
            "discretization": dict(self.discretization),
            "tangency_sensitive": self.tangency_sensitive,
        }
        if self.t0_sorted is not None:
            out["t0_sorted"] = [_jsonable(float(t)) for t in self.t0_sorted]
        if self.t1_sorted is not None:
            out["t1_sorted"] = [_jsonable(float(t)) for t in self.t1_sorted]
        if self.lenient is not None:
            out["lenient"] = self.lenient
        return out


def full_report(field, omega, cloud0, cloud1,
                config: FlowConfig | None = None,
                eps_list=(), m_grid: int = 1024,
                lenient: bool = False) -> InfimumTimeReport:
    """Every infimum-time quantity for a source/target cloud pair.

    Strict mode requires the Geometric Condition (all entry times finite)
    and equal total masses.  Lenient mode drops never-entering mass from
    the profiles and evaluates the macroscopic times on the largest mass
    both sides can deliver, reporting what was dropped.
    """
    config = config or FlowConfig()
    times = EntryTimes.compute(field, omega, cloud0, cloud1, config)
    geo = check_geometric_condition(cloud0, cloud1, field, omega, config,
                                    times)
    if not geo.passes and not lenient:
        raise GeometricConditionError(
            f"geometric condition fails: {geo.violating0.size} source / "
            f"{geo.violating1.size} target atoms never cross the control "
            f"region (use lenient mode to drop them)",
            violating0=geo.violating0, violating1=geo.violating1)

    gamma0 = cloud0.total_mass
    gamma1 = cloud1.total_mass
    if abs(gamma0 - gamma1) > 1e-6 * max(gamma0, gamma1):
        raise ValueError("source and target measures carry different mass")

    # normalized profiles (macro quantities are defined for gamma = 1)
    F = MassProfile(times.t0, times.w0 / gamma0)
    B = MassProfile(times.t1, times.w1 / gamma1)

    report = InfimumTimeReport(
        t0_sorted=np.sort(times.t0), t1_sorted=np.sort(times.t1),
        discretization=_disc(cloud0.n, config),
        tangency_sensitive=bool(times.tangency0.any()
                                or times.tangency1.any()))

    uniform = (cloud0.equal_weights() and cloud1.equal_weights()
               and cloud0.n == cloud1.n)
    if uniform and geo.passes:
        report.m_e = minmax_pairing_time(times.t0, times.t1)
        report.m_a = minmax_pairing_time(times.t0, times.t1_bar)
        report.m_star_e = star_time(times.t0, times.t1)
        report.m_star_a = star_time(times.t0, times.t1_bar)

    if geo.passes:
        report.s, _ = macro_infimum(F, B, m_grid)
        report.s_star = max(F.sup_time, B.sup_time)
        eff = 0.0
    else:
        # compare on the mass both sides can actually deliver
        common = min(F.reachable_mass, B.reachable_mass)
        eff = 1.0 - common
        s, _ = macro_infimum(F, B, m_grid, eps=eff)
        report.s = s
        report.s_star = max(
            float(F.times[-1]) if F.times.size else 0.0,
            float(B.times[-1]) if B.times.size else 0.0)
        report.lenient = {
            "dropped_source_mass": F.violating_mass,
            "dropped_target_mass": B.violating_mass,
            "compared_mass": common,
        }
    for eps in eps_list:
        v, _ = macro_infimum(F, B, m_grid, eps=min(1.0, eps + eff))
        report.s_eps.append((float(eps), v))
    return report


# ---------------------------------------------------------------------------
# non-controllability certificate
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    """Witness that horizon T is too short: any admissible control leaves
    W1(final, target) >= lower_bound.

    Mass m enters the control region only from time t_bar on; whatever is
    picked up later stays inside the evoluted set of horizon T - t_bar, so
    target mass farther than D from that set (fraction 1 - m - q) must be
    served across distance >= D.
    """

    m: float
    t_bar: float
    D: float
    q: float
    lower_bound: float
    horizon: float
    resolution: float

    def to_dict(self) -> dict:
        return {"m": self.m, "t_bar": self.t_bar, "D": self.D, "q": self.q,
                "lower_bound": self.lower_bound,
                "evoluted_horizon": self.horizon,
                "evoluted_resolution": self.resolution}


def noncontrollability_certificate(F: MassProfile, B: MassProfile,
                                   mu1_cloud, field, omega, T: float,
                                   config: FlowConfig | None = None,
                                   domain=None, dilation: float | None = None,
                                   max_candidates: int = 24,
                                   n_boundary: int = 96,
                                   n_interior: int = 144
                                   ) -> Certificate | None:
    """Best positive W1 lower bound over the breakpoint scan, or None.

    Requires normalized profiles (total mass 1) and T > S*.
    """
    config = config or FlowConfig()
    if abs(F.total_mass - 1.0) > 1e-6 or abs(B.total_mass - 1.0) > 1e-6:
        raise ValueError("certificate expects profiles normalized to mass 1")
    s_star = max(F.sup_time, B.sup_time)
    if not T > s_star:
        raise CertificateNotApplicableError(T, s_star)

    # candidate pickup-completion times: distinct F breakpoints below T
    t_all = np.unique(F.times[F.times < T])
    if t_all.size == 0:
        return None
    if t_all.size > max_candidates:
        pick = np.unique(np.linspace(0, t_all.size - 1,
                                     max_candidates).astype(int))
        t_all = t_all[pick]

    archive = EvolutedArchive(field, omega, T - float(t_all[0]), config,
                              n_boundary, n_interior)
    if dilation is None:
        pts = archive.snaps.reshape(-1, archive.snaps.shape[2])
        if domain is not None:
            lo = np.asarray(domain[0], dtype=np.float64)
            hi = np.asarray(domain[1], dtype=np.float64)
        else:
            lo = np.minimum(pts.min(axis=0),
                            mu1_cloud.positions.min(axis=0))
            hi = np.maximum(pts.max(axis=0),
                            mu1_cloud.positions.max(axis=0))
        dilation = 0.05 * float(np.linalg.norm(hi - lo))
    D = float(dilation)

    slack = 1e-9
    best = None
    for t_bar in t_all:
        m_before = F(t_bar - 1e-12)  # mass strictly before t_bar
        if m_before >= 1.0 - slack:
            break
        # witness condition: T < F^-1(m) + B^-1(1 - m) just above m_before
        if T >= float(t_bar) + B.inverse(1.0 - m_before - slack):
            continue
        ev = archive.prefix(T - float(t_bar))
        q = ev.mass_within(mu1_cloud, D)
        bound = D * (1.0 - m_before - q)
        if bound > 0.0 and (best is None or bound > best.lower_bound):
            best = Certificate(m=float(m_before), t_bar=float(t_bar), D=D,
                               q=float(q), lower_bound=float(bound),
                               horizon=T - float(t_bar),
                               resolution=ev.resolution)
    return best
