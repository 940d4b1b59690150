"""Command-line front end.

Subcommands cover the pipeline stages: ``mintime`` (infimum steering
times), ``simulate`` (mesh, synthesis, Lagrangian run, diagnostics),
``certify`` (W1 lower bound for too-short horizons), ``assign``
(space-time pairing of explicit atom lists), ``mesh`` (mesh construction
only), and ``examples`` (write the bundled scenario files).

Exit codes: 0 ok, 2 scenario validation, 3 geometric condition,
4 infeasible horizon, 5 certificate not applicable.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .assignment import (pair_separation, solve_bottleneck, solve_min_sum,
                         transport_cost_matrix, verify_non_crossing)
from .cloud import BoxDensitySpec, ParticleCloud
from .control import InfeasibleTimeError, synthesize_macro
from .expr import ExprError
from .flow import entry_times, integrate_flow
from .mesh import build_mesh
from .mintime import (CertificateNotApplicableError, EntryTimes,
                      GeometricConditionError, MassProfile, full_report,
                      noncontrollability_certificate)
from .scenario import Scenario, ScenarioError, load_scenario
from .simulate import run

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GEOMETRIC = 3
EXIT_INFEASIBLE = 4
EXIT_NOT_APPLICABLE = 5


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else "inf"


def _scenario(args) -> Scenario:
    return load_scenario(args.scenario, dt=args.dt, n_atoms=args.atoms,
                         seed=args.seed)


def _profiles(scn: Scenario, config):
    """Normalized mass-entry profiles and the sampled clouds.

    Strict on the geometric condition: the certificate's mass accounting
    covers everything, so nothing may be silently dropped here.
    """
    c0, c1 = scn.clouds()
    times = EntryTimes.compute(scn.field, scn.region, c0, c1, config)
    bad0 = int((~np.isfinite(times.t0)).sum())
    bad1 = int((~np.isfinite(times.t1)).sum())
    if bad0 or bad1:
        raise GeometricConditionError(
            f"geometric condition fails: {bad0} source / {bad1} target "
            f"atoms never cross the control region")
    F = MassProfile(times.t0, times.w0 / c0.total_mass)
    B = MassProfile(times.t1, times.w1 / c1.total_mass)
    return F, B, c0, c1


def cmd_mintime(args) -> int:
    scn = _scenario(args)
    config = scn.flow_config()
    c0, c1 = scn.clouds()
    report = full_report(scn.field, scn.region, c0, c1, config,
                         eps_list=scn.numerics.get("eps_list", ()),
                         m_grid=scn.numerics["m_grid"],
                         lenient=args.lenient)
    _dump(report.to_dict())
    return EXIT_OK


def cmd_simulate(args) -> int:
    import os

    scn = _scenario(args)
    if scn.control is None:
        raise ScenarioError("control: block required for simulate")
    config = scn.flow_config()
    T = float(scn.control["T"])
    c0, c1 = scn.clouds()

    report = full_report(scn.field, scn.region, c0, c1, config,
                         m_grid=scn.numerics["m_grid"],
                         lenient=args.lenient)
    if T <= report.s:
        raise InfeasibleTimeError(
            f"horizon T={T} is not above the infimum steering time "
            f"S={report.s:.6f}", required=report.s)

    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    n = scn.numerics["mesh_n"]
    mesh0 = build_mesh(scn.mu0, n)
    mesh1 = build_mesh(scn.mu1, n)
    mesh0.to_csv(os.path.join(out, "mesh0.csv"))
    mesh1.to_csv(os.path.join(out, "mesh1.csv"))

    cf, pairing = synthesize_macro(
        mesh0, mesh1, T, float(scn.control.get("epsilon", 0.0)),
        scn.field, scn.region, config,
        delta=scn.control.get("delta"),
        gain_cap=scn.control.get("gain_cap"))
    cf.to_json(os.path.join(out, "control.json"))

    snapshots = scn.control.get("snapshots") or [0.0, T]
    target = (scn.mu1.sample(c0.n, seed=scn.seed)
              if isinstance(scn.mu1, BoxDensitySpec) else scn.mu1)
    sim_report, clouds, final = run(
        c0, scn.field, cf, T, config, snapshots=snapshots, target=target,
        seed=scn.seed)
    for t, cloud in zip(sim_report.snapshot_times, clouds):
        cloud.to_csv(os.path.join(out, f"snapshot_t{t:g}.csv"))

    sim_report.meta["pairing"] = pairing.to_dict()
    sim_report.meta["s"] = report.s
    sim_report.meta["s_star"] = report.s_star
    with open(os.path.join(out, "run_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(sim_report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"final W1: {sim_report.final_w1:.6f}")
    print(f"peak density: {sim_report.peak_density:.6f}")
    return EXIT_OK


def cmd_certify(args) -> int:
    scn = _scenario(args)
    config = scn.flow_config()
    T = args.T if args.T is not None else (
        float(scn.control["T"]) if scn.control else None)
    if T is None:
        raise ScenarioError("control.T: required (or pass --T)")
    F, B, _, c1 = _profiles(scn, config)
    cert = noncontrollability_certificate(F, B, c1, scn.field, scn.region,
                                          T, config)
    _dump({"certificate": cert.to_dict() if cert else None, "T": T})
    return EXIT_OK


def cmd_assign(args) -> int:
    scn = _scenario(args)
    if not (isinstance(scn.mu0, ParticleCloud)
            and isinstance(scn.mu1, ParticleCloud)):
        raise ScenarioError(
            "mu0: assign needs explicit atom lists on both sides")
    config = scn.flow_config()
    T = args.T if args.T is not None else (
        float(scn.control["T"]) if scn.control else None)
    if T is None:
        raise ScenarioError("control.T: required (or pass --T)")
    c0, c1 = scn.mu0, scn.mu1
    t0, _ = entry_times(scn.field, scn.region, c0.positions, "forward",
                        config=config)
    t1, _ = entry_times(scn.field, scn.region, c1.positions, "backward",
                        config=config)
    if not (np.isfinite(t0).all() and np.isfinite(t1).all()):
        raise GeometricConditionError(
            "geometric condition fails: some atom never crosses the "
            "control region")
    y0 = np.vstack([integrate_flow(scn.field, c0.positions[i], float(t0[i]),
                                   config) for i in range(c0.n)])
    y1 = np.vstack([integrate_flow(scn.field, c1.positions[i], -float(t1[i]),
                                   config) for i in range(c1.n)])
    cost = transport_cost_matrix(y0, t0, y1, T - t1)
    solver = solve_bottleneck if args.kind == "bottleneck" else solve_min_sum
    asg = solver(cost)
    _dump({"sigma": [int(s) for s in asg.sigma],
           "value": asg.value, "kind": asg.kind,
           "non_crossing": bool(verify_non_crossing(y0, t0, y1, T - t1,
                                                    asg.sigma)),
           "min_separation": pair_separation(y0, t0, y1, T - t1, asg.sigma)})
    return EXIT_OK


def cmd_mesh(args) -> int:
    import os

    scn = _scenario(args)
    n = args.n or scn.numerics["mesh_n"]
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    info = {}
    for key, measure in (("mesh0", scn.mu0), ("mesh1", scn.mu1)):
        mesh = build_mesh(measure, n)
        mesh.to_csv(os.path.join(out, f"{key}.csv"))
        info[key] = {"cells": len(mesh), "n": n,
                     "cell_mass": mesh.cell_mass,
                     "kept_mass": mesh.kept_mass}
    _dump(info)
    return EXIT_OK


EXAMPLE_SCENARIOS = {
    "example1.json": {
        "dimension": 1,
        "seed": 42,
        "field": {"type": "constant", "value": [1.0]},
        "region": {"type": "box", "lo": [5.0], "hi": [6.0]},
        "mu0": {"type": "boxes",
                "components": [[[0.0], [2.0], 0.5]]},
        "mu1": {"type": "boxes",
                "components": [[[7.0], [8.0], 0.5],
                               [[10.0], [11.0], 0.5]]},
        "numerics": {"dt": 1e-3, "horizon": 50.0, "n_atoms": 2000,
                     "mesh_n": 4, "m_grid": 1024},
        "control": {"T": 8.1, "delta": 0.1, "epsilon": 0.05,
                    "snapshots": [0.0, 3.0, 6.0, 8.1]},
    },
    "example2.json": {
        "dimension": 2,
        "seed": 42,
        "field": {"type": "constant", "value": [1.0, 0.0]},
        "region": {"type": "box", "lo": [5.0, 0.0], "hi": [7.0, 4.0]},
        "mu0": {"type": "boxes",
                "components": [[[0.0, 1.0], [4.0, 3.0], 0.125]]},
        "mu1": {"type": "boxes",
                "components": [[[8.0, 0.0], [9.0, 4.0], 0.0625],
                               [[13.0, 0.0], [14.0, 4.0], 0.0625],
                               [[9.0, 0.0], [13.0, 1.0], 0.0625],
                               [[9.0, 3.0], [13.0, 4.0], 0.0625]]},
        "numerics": {"dt": 1e-3, "horizon": 50.0, "n_atoms": 2000,
                     "mesh_n": 3, "m_grid": 1024},
        "control": {"T": 9.0, "epsilon": 0.05,
                    "snapshots": [0.0, 3.0, 6.0, 9.0]},
    },
    "fig8_left.json": {
        "dimension": 2,
        "seed": 42,
        "field": {"type": "constant", "value": [1.0, 0.0]},
        "region": {"type": "box", "lo": [-1.0, -1.5], "hi": [1.0, 1.5]},
        "mu0": {"type": "atoms", "positions": [[-2.0, 0.0]]},
        "mu1": {"type": "atoms", "positions": [[2.0, 0.0]]},
        "numerics": {"dt": 1e-3, "horizon": 50.0},
        "control": {"T": 2.2, "delta": 0.1},
    },
    "fig8_right.json": {
        "dimension": 2,
        "seed": 42,
        "field": {"type": "expression", "components": "-x2, x1"},
        "region": {"type": "box", "lo": [-2.0, -1.5], "hi": [0.0, 1.5]},
        "mu0": {"type": "atoms",
                "positions": [[0.7071067811865476, -0.7071067811865476]]},
        "mu1": {"type": "atoms",
                "positions": [[0.7071067811865476, 0.7071067811865476]]},
        "numerics": {"dt": 1e-3, "horizon": 50.0},
    },
}


def cmd_examples(args) -> int:
    import os

    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    for name, data in EXAMPLE_SCENARIOS.items():
        with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
        print(os.path.join(out, name))
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdsteer",
        description="Minimal-time steering of crowds through a control "
                    "region")
    parser.add_argument("--dt", type=float, default=None,
                        help="override the scenario time step")
    parser.add_argument("--atoms", type=int, default=None,
                        help="override the scenario atom count")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    parser.add_argument("--lenient", action="store_true",
                        help="drop atoms that never cross the control "
                             "region instead of failing")
    parser.add_argument("--out", default=None, metavar="DIR",
                        help="output directory for file-writing commands")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mintime", help="infimum steering times")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_mintime)

    p = sub.add_parser("simulate",
                       help="synthesize a control and run the particle "
                            "scheme")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify",
                       help="W1 lower bound showing T is too short")
    p.add_argument("scenario")
    p.add_argument("--T", type=float, default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("assign", help="space-time pairing of atom lists")
    p.add_argument("scenario")
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--kind", choices=["min-sum", "bottleneck"],
                   default="min-sum")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("mesh", help="build the cell meshes only")
    p.add_argument("scenario")
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("examples", help="write the bundled scenario files")
    p.set_defaults(func=cmd_examples)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ExprError as e:
        print(f"field expression error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except GeometricConditionError as e:
        print(f"geometric condition: {e}", file=sys.stderr)
        return EXIT_GEOMETRIC
    except InfeasibleTimeError as e:
        print(f"infeasible horizon: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CertificateNotApplicableError as e:
        print(f"not applicable: {e}", file=sys.stderr)
        return EXIT_NOT_APPLICABLE


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
