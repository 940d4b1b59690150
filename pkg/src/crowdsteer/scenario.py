"""Scenario files: a JSON description of one steering problem.

A scenario fixes the dimension, the base field, the control region, the
source and target measures, and the numerical knobs.  Everything the CLI
does starts from one; library users can also load them to get consistent
objects without repeating geometry by hand.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

try:
    import jsonschema
    HAS_JSONSCHEMA = True
except ImportError:
    HAS_JSONSCHEMA = False

from .cloud import BoxDensitySpec, ParticleCloud, measure_from_dict
from .fields import VectorField
from .flow import FlowConfig
from .regions import Region, region_from_dict


class ScenarioError(ValueError):
    """Invalid scenario file; message carries a path anchor like
    'control.T: must be positive'."""


_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_VECTOR = {"type": "array", "items": _NUMBER, "minItems": 1, "maxItems": 2}

_MEASURE_SCHEMA = {
    "type": "object",
    "oneOf": [
        {
            "properties": {
                "type": {"const": "boxes"},
                "components": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "array",
                        "prefixItems": [_VECTOR, _VECTOR, _NUMBER],
                        "minItems": 3,
                        "maxItems": 3,
                    },
                },
            },
            "required": ["type", "components"],
            "additionalProperties": False,
        },
        {
            "properties": {
                "type": {"const": "atoms"},
                "positions": {"type": "array", "minItems": 1},
                "weights": {"type": "array"},
                "csv": {"type": "string"},
            },
            "required": ["type"],
            "additionalProperties": False,
        },
    ],
}

SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "dimension": {"type": "integer", "minimum": 1, "maximum": 2},
        "seed": {"type": "integer"},
        "field": {
            "type": "object",
            "properties": {
                "type": {"enum": ["constant", "rotation", "expression"]},
                "value": _VECTOR,
                "components": {
                    "anyOf": [{"type": "string"},
                              {"type": "array", "items": {"type": "string"}}]
                },
            },
            "required": ["type"],
            "additionalProperties": False,
        },
        "region": {
            "type": "object",
            "properties": {
                "type": {"enum": ["box", "ball", "polygon"]},
                "lo": _VECTOR,
                "hi": _VECTOR,
                "center": _VECTOR,
                "radius": _POSITIVE,
                "vertices": {"type": "array", "minItems": 3},
            },
            "required": ["type"],
            "additionalProperties": False,
        },
        "mu0": _MEASURE_SCHEMA,
        "mu1": _MEASURE_SCHEMA,
        "numerics": {
            "type": "object",
            "properties": {
                "dt": _POSITIVE,
                "horizon": _POSITIVE,
                "n_atoms": {"type": "integer", "minimum": 1},
                "mesh_n": {"type": "integer", "minimum": 2},
                "m_grid": {"type": "integer", "minimum": 2},
                "eps_list": {"type": "array", "items": _NUMBER},
            },
            "additionalProperties": False,
        },
        "control": {
            "type": "object",
            "properties": {
                "T": _POSITIVE,
                "delta": _POSITIVE,
                "epsilon": {"type": "number", "minimum": 0},
                "gain_cap": _POSITIVE,
                "snapshots": {"type": "array", "items": _NUMBER},
            },
            "required": ["T"],
            "additionalProperties": False,
        },
    },
    "required": ["dimension", "field", "region", "mu0", "mu1"],
    "additionalProperties": False,
}

_NUMERICS_DEFAULTS = {"dt": 1e-3, "horizon": 50.0, "n_atoms": 2000,
                      "mesh_n": 3, "m_grid": 1024, "eps_list": []}


@dataclass
class Scenario:
    """Validated scenario: constructed objects plus the raw knobs."""

    dimension: int
    field: VectorField
    region: Region
    mu0: object                 # BoxDensitySpec or ParticleCloud
    mu1: object
    numerics: dict
    control: dict | None
    seed: int
    path: str | None = None
    raw: dict = dc_field(default_factory=dict)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(dt=self.numerics["dt"],
                          horizon=self.numerics["horizon"])

    def clouds(self, n_atoms: int | None = None):
        """Source and target as equal-size clouds.

        Box densities are sampled (stratified, deterministic); explicit
        atom lists pass through unchanged.
        """
        n = n_atoms or self.numerics["n_atoms"]
        c0 = (self.mu0.sample(n, seed=self.seed)
              if isinstance(self.mu0, BoxDensitySpec) else self.mu0)
        c1 = (self.mu1.sample(n, seed=self.seed)
              if isinstance(self.mu1, BoxDensitySpec) else self.mu1)
        return c0, c1


def _field_from_dict(spec: dict, dim: int) -> VectorField:
    kind = spec["type"]
    if kind == "constant":
        if "value" not in spec:
            raise ScenarioError("field.value: required for a constant field")
        if len(spec["value"]) != dim:
            raise ScenarioError(
                f"field.value: expected {dim} components, "
                f"got {len(spec['value'])}")
        src = ", ".join(repr(float(v)) for v in spec["value"])
        return VectorField(src, dim)
    if kind == "rotation":
        if dim != 2:
            raise ScenarioError("field.type: rotation needs dimension 2")
        return VectorField("-x2, x1", 2)
    comps = spec.get("components")
    if comps is None:
        raise ScenarioError(
            "field.components: required for an expression field")
    if isinstance(comps, list):
        comps = ", ".join(comps)
    return VectorField(comps, dim)


def _schema_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "(top level)"


def validate_dict(data: dict) -> None:
    """Schema plus semantic checks; raises ScenarioError."""
    if not isinstance(data, dict):
        raise ScenarioError("(top level): scenario must be a JSON object")
    if HAS_JSONSCHEMA:
        validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
        errors = sorted(validator.iter_errors(data),
                        key=lambda e: list(e.absolute_path))
        if errors:
            best = jsonschema.exceptions.best_match(errors)
            raise ScenarioError(f"{_schema_path(best)}: {best.message}")
    else:  # minimal fallback: required keys only
        for key in SCENARIO_SCHEMA["required"]:
            if key not in data:
                raise ScenarioError(f"{key}: missing required key")


def load_scenario(path_or_dict, dt: float | None = None,
                  n_atoms: int | None = None,
                  seed: int | None = None) -> Scenario:
    """Load, validate, and construct a scenario.

    dt / n_atoms / seed override the file (CLI flags).  Raises
    ScenarioError with a path-anchored message on any problem.
    """
    path = None
    if isinstance(path_or_dict, dict):
        data = path_or_dict
    else:
        path = str(path_or_dict)
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ScenarioError(f"(file): {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ScenarioError(f"(file): {path} is not valid JSON "
                                f"(line {e.lineno}: {e.msg})") from None
    validate_dict(data)

    dim = data["dimension"]
    try:
        region = region_from_dict(data["region"])
    except (ValueError, KeyError) as e:
        raise ScenarioError(f"region: {e}") from None
    if region.dim != dim:
        raise ScenarioError(
            f"region: dimension {region.dim} does not match scenario "
            f"dimension {dim}")
    if region.inradius <= 0:
        raise ScenarioError("region: empty interior")

    field = _field_from_dict(data["field"], dim)

    measures = []
    for key in ("mu0", "mu1"):
        base = os.path.dirname(path) if path else None
        try:
            m = measure_from_dict(data[key], base_dir=base)
        except (ValueError, KeyError, OSError) as e:
            raise ScenarioError(f"{key}: {e}") from None
        if m.dim != dim:
            raise ScenarioError(
                f"{key}: dimension {m.dim} does not match scenario "
                f"dimension {dim}")
        measures.append(m)
    mu0, mu1 = measures
    m0, m1 = mu0.total_mass, mu1.total_mass
    if m0 <= 0:
        raise ScenarioError("mu0: zero total mass")
    if abs(m0 - m1) > 1e-9 * max(1.0, m0, m1):
        raise ScenarioError(
            f"mu1: total mass {m1!r} differs from mu0 mass {m0!r}")

    numerics = dict(_NUMERICS_DEFAULTS)
    numerics.update(data.get("numerics", {}))
    if dt is not None:
        numerics["dt"] = float(dt)
    if n_atoms is not None:
        numerics["n_atoms"] = int(n_atoms)

    control = data.get("control")
    if control is not None:
        snaps = control.get("snapshots", [])
        bad = [s for s in snaps if s < 0 or s > control["T"] + 1e-9]
        if bad:
            raise ScenarioError(
                f"control.snapshots: {bad[0]!r} outside [0, T]")

    return Scenario(
        dimension=dim, field=field, region=region, mu0=mu0, mu1=mu1,
        numerics=numerics, control=dict(control) if control else None,
        seed=int(seed if seed is not None else data.get("seed", 42)),
        path=path, raw=data)
