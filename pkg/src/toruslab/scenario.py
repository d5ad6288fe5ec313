"""Scenario files, the built-in catalog and validation.

A scenario is a TOML document::

    id = "example1"
    expect = "two_distinct_toroidal_leaves"      # optional

    [ambient]
    coords = ["x1", "y1", "x2", "y2", "x3", "y3"]
    pairing = [["x1", "y1"], ["x2", "y2"], ["x3", "y3"]]

    [alpha]
    coeffs = ["y1/2", "-x1/2", ...]              # one per coordinate

    [manifold]
    constraints = ["(x1^2+y1^2)^2 + x2^2 + y2^2", "x2^2+y2^2+x3^2+y3^2"]
    levels = [4.0, 1.0]

    [[action.generators]]
    kind = "linear_rotation"                     # weights: one per pair
    weights = [1, 1, 1]

    [[action.generators]]
    kind = "numeric"                             # components: one per coordinate
    components = ["0", "0", "-2*pi*y2", "2*pi*x2", "-2*pi*y3", "2*pi*x3"]

    [tolerances]                                 # all optional
    [sampling]                                   # all optional
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .action import Generator, TorusAction
from .expr import ExpressionSyntaxError
from .geometry import AmbientSpace, LevelSetManifold, OneForm

__all__ = [
    "CATALOG",
    "DEFAULT_SAMPLING",
    "DEFAULT_TOLERANCES",
    "Scenario",
    "ScenarioError",
    "apply_override",
    "catalog_config",
    "example1_generic_point",
    "load_scenario",
    "scenario_from_config",
]

DEFAULT_TOLERANCES = {
    "constraint_tol": 1e-10,
    "rank_tol": 1e-8,
    "grad_tol": 1e-8,
    "leaf_tol": 1e-6,
    "orbit_tol": 1e-5,
    "closure_tol": 1e-6,
    "distinctness_tol": 1e-6,
    "kernel_tol": 1e-8,
    "constant_tol": 1e-10,
    "s1_constant_tol": 1e-8,
    "pullback_tol": 1e-8,
    "freeness_tol": 1e-8,
    "commutator_tol": 1e-8,
    "periodicity_tol": 1e-8,
}

DEFAULT_SAMPLING = {
    "seed": 0,
    "points": 200,
    "restarts": 16,
    "quadrature": 32,
    "box": 2.0,
    "trace_steps": 48,
    "trace_step_size": 0.05,
    "orbit_grid": 64,
    "trace_from": "max",
}

VERDICTS = (
    "two_distinct_toroidal_leaves",
    "all_leaves_toroidal",
    "hypotheses_violated",
    "inconclusive",
)


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` is the dotted field path at fault."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Scenario:
    id: str
    ambient: AmbientSpace
    alpha: OneForm
    manifold: LevelSetManifold
    action: TorusAction
    tolerances: dict
    sampling: dict
    expect: str | None
    config: dict

    @property
    def hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

_COORDS6 = ["x1", "y1", "x2", "y2", "x3", "y3"]
_PAIRS6 = [["x1", "y1"], ["x2", "y2"], ["x3", "y3"]]
_LIOUVILLE6 = ["y1/2", "-x1/2", "y2/2", "-x2/2", "y3/2", "-x3/2"]


def _rotation(weights):
    return {"kind": "linear_rotation", "weights": list(weights)}


def _example1(c1=4.0, c2=1.0, z2_weights=(0, 1, 1)):
    return {
        "id": "example1",
        "expect": "two_distinct_toroidal_leaves",
        "ambient": {"coords": list(_COORDS6), "pairing": copy.deepcopy(_PAIRS6)},
        "alpha": {"coeffs": list(_LIOUVILLE6)},
        "manifold": {
            "constraints": ["(x1^2+y1^2)^2 + x2^2 + y2^2", "x2^2 + y2^2 + x3^2 + y3^2"],
            "levels": [c1, c2],
        },
        "action": {"generators": [_rotation((1, 1, 1)), _rotation(z2_weights)]},
    }


def _example2(c1=1.0, c2=3.0):
    return {
        "id": "example2",
        "expect": "all_leaves_toroidal",
        "ambient": {"coords": list(_COORDS6), "pairing": copy.deepcopy(_PAIRS6)},
        "alpha": {"coeffs": list(_LIOUVILLE6)},
        "manifold": {
            "constraints": ["x1^2 + y1^2", "x1^2 + y1^2 + x2^2 + y2^2 + x3^2 + y3^2"],
            "levels": [c1, c2],
        },
        "action": {"generators": [_rotation((1, 0, 0)), _rotation((1, 1, 1))]},
    }


def _example1_tampered():
    cfg = _example1(z2_weights=(0, 1, 2))
    cfg["id"] = "example1_tampered"
    cfg["expect"] = "hypotheses_violated"
    return cfg


CATALOG = {
    "example1": _example1,
    "example2": _example2,
    "example1_tampered": _example1_tampered,
}


def catalog_config(name: str) -> dict:
    try:
        return CATALOG[name]()
    except KeyError:
        raise ScenarioError("", f"unknown catalog scenario {name!r}") from None


def example1_generic_point(t: float, c1: float = 4.0, c2: float = 1.0) -> np.ndarray:
    """Point of Example 1 with |z2|² = t·c2 and all phases zero.

    t = 0 lies on the maximum leaf, t = 1 on the minimum leaf.
    """
    b = t * c2
    return np.array([(c1 - b) ** 0.25, 0.0, math.sqrt(b), 0.0, math.sqrt(c2 - b), 0.0])


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` in place; list elements are addressed by index."""
    if "=" not in assignment:
        raise ScenarioError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for depth, part in enumerate(parts[:-1]):
        path = ".".join(parts[: depth + 1])
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ScenarioError(path, "invalid list index") from None
        else:
            node = node.setdefault(part, {})
        if not isinstance(node, (dict, list)):
            raise ScenarioError(path, "cannot descend into a scalar")
    last = parts[-1]
    value = _parse_value(raw.strip())
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ScenarioError(key, "invalid list index") from None
    else:
        node[last] = value


def _require(cfg: dict, key: str, path: str, kind=None):
    if not isinstance(cfg, dict) or key not in cfg:
        raise ScenarioError(f"{path}{key}", "missing required field")
    value = cfg[key]
    if kind is not None and not isinstance(value, kind):
        raise ScenarioError(f"{path}{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _merged(defaults: dict, given, path: str) -> dict:
    given = {} if given is None else given
    if not isinstance(given, dict):
        raise ScenarioError(path, "expected a table")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ScenarioError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    out = dict(defaults)
    for k, v in given.items():
        d = defaults[k]
        if isinstance(d, str):
            if not isinstance(v, str):
                raise ScenarioError(f"{path}.{k}", "expected a string")
        elif isinstance(d, int) and not isinstance(d, bool):
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ScenarioError(f"{path}.{k}", "expected a non-negative integer")
        else:
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ScenarioError(f"{path}.{k}", "expected a positive number")
            v = float(v)
        out[k] = v
    return out


def scenario_from_config(cfg: dict) -> Scenario:
    """Validate a raw configuration and build every object it describes."""
    cfg = copy.deepcopy(cfg)
    sid = _require(cfg, "id", "", str)
    expect = cfg.get("expect")
    if expect is not None and expect not in VERDICTS:
        raise ScenarioError("expect", f"must be one of {VERDICTS}")

    amb = _require(cfg, "ambient", "", dict)
    coords = _require(amb, "coords", "ambient.", list)
    index = {c: i for i, c in enumerate(coords)}
    pairing = []
    for j, pair in enumerate(amb.get("pairing", [])):
        if not (isinstance(pair, list) and len(pair) == 2 and all(c in index for c in pair)):
            raise ScenarioError(f"ambient.pairing.{j}", "expected a pair of coordinate names")
        pairing.append((index[pair[0]], index[pair[1]]))
    try:
        ambient = AmbientSpace(tuple(coords), tuple(pairing))
    except ValueError as exc:
        raise ScenarioError("ambient", str(exc)) from None

    def parse_list(items, path):
        out = []
        for j, text in enumerate(items):
            if not isinstance(text, (str, int, float)):
                raise ScenarioError(f"{path}.{j}", "expected an expression string")
            try:
                out.append(ambient.parse(str(text)))
            except (ExpressionSyntaxError, ValueError) as exc:
                raise ScenarioError(f"{path}.{j}", str(exc)) from None
        return out

    alpha_cfg = _require(cfg, "alpha", "", dict)
    coeffs = _require(alpha_cfg, "coeffs", "alpha.", list)
    if len(coeffs) != ambient.dim:
        raise ScenarioError("alpha.coeffs", f"expected {ambient.dim} coefficients")
    alpha = OneForm(tuple(parse_list(coeffs, "alpha.coeffs")))

    tol = _merged(DEFAULT_TOLERANCES, cfg.get("tolerances"), "tolerances")
    smp = _merged(DEFAULT_SAMPLING, cfg.get("sampling"), "sampling")
    if smp["trace_from"] not in ("max", "min", "sample"):
        raise ScenarioError("sampling.trace_from", "expected 'max', 'min' or 'sample'")
    if smp["quadrature"] < 1 or smp["orbit_grid"] < 1:
        raise ScenarioError("sampling", "quadrature and orbit_grid must be >= 1")

    man = _require(cfg, "manifold", "", dict)
    cons = parse_list(_require(man, "constraints", "manifold.", list), "manifold.constraints")
    levels = _require(man, "levels", "manifold.", list)
    if len(levels) != len(cons) or not all(
        isinstance(c, (int, float)) and not isinstance(c, bool) for c in levels
    ):
        raise ScenarioError("manifold.levels", "expected one number per constraint")
    manifold = LevelSetManifold(
        ambient, tuple(cons), tuple(levels), tol["constraint_tol"], tol["rank_tol"]
    )

    act = _require(cfg, "action", "", dict)
    gens_cfg = _require(act, "generators", "action.", list)
    if not gens_cfg:
        raise ScenarioError("action.generators", "at least one generator is required")
    gens = []
    for j, g in enumerate(gens_cfg):
        path = f"action.generators.{j}"
        if not isinstance(g, dict):
            raise ScenarioError(path, "expected a table")
        kind = g.get("kind", "linear_rotation" if "weights" in g else "numeric")
        if kind == "linear_rotation":
            w = _require(g, "weights", path + ".", list)
            if not ambient.pairing:
                raise ScenarioError(path, "rotation weights need an ambient pairing")
            try:
                gens.append(Generator.rotation(ambient, w))
            except ValueError as exc:
                raise ScenarioError(path + ".weights", str(exc)) from None
        elif kind == "numeric":
            comps = _require(g, "components", path + ".", list)
            if len(comps) != ambient.dim:
                raise ScenarioError(path + ".components", f"expected {ambient.dim} components")
            gens.append(Generator(tuple(parse_list(comps, path + ".components")), "numeric"))
        else:
            raise ScenarioError(path + ".kind", f"unknown flow kind {kind!r}")
    action = TorusAction(ambient, tuple(gens), manifold)

    spare = ambient.dim - len(cons) - action.r
    if spare < 0 or spare % 2:
        raise ScenarioError(
            "action.generators",
            f"dim {ambient.dim} - {len(cons)} constraints - r={action.r} must be even and >= 0",
        )

    effective = copy.deepcopy(cfg)
    effective["tolerances"] = tol
    effective["sampling"] = smp
    return Scenario(
        id=sid,
        ambient=ambient,
        alpha=alpha,
        manifold=manifold,
        action=action,
        tolerances=tol,
        sampling=smp,
        expect=expect,
        config=effective,
    )


def load_scenario(source: str | Path, overrides=()) -> Scenario:
    """Load a catalog id or a TOML file, apply ``key=value`` overrides, validate."""
    source = str(source)
    if source in CATALOG:
        cfg = catalog_config(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ScenarioError("", f"no catalog scenario or file named {source!r}")
        try:
            cfg = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError("", f"malformed scenario file: {exc}") from None
    for item in overrides:
        apply_override(cfg, item)
    return scenario_from_config(cfg)
