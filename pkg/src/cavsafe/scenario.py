"""Scenario files: YAML key-value schema, validation and presets.

A scenario file is a YAML mapping. Every key is optional; missing keys take
the defaults below, and unknown keys are rejected with the file line they
appear on::

    name: my-run
    seed: 0
    dt: 0.1                # control period, s
    duration: 300.0        # hard stop, s
    substeps: 10           # RK4 substeps per control period
    noise_sigma: 0.0       # std of zero-mean noise added to u_ref, m/s^2
    hold_feedforward: true # average the planned control over each hold interval
    geometry: default      # built-in 6-path layout, or give `paths` instead
    paths:                 # explicit layout (mutually exclusive with geometry)
      - {id: 0, length: 212.0, conflicts: {0: 110.5, 1: 101.5}}
    arrival:
      rate: 3600.0         # veh/h over all paths
      count: 24
      mode: exponential    # or uniform
      split: [1, 1, 1, 1, 1, 1]
      v0_range: [12.0, 14.0]
    limits: {v_min: 0.2, v_max: 20.0, u_min: -2.0, u_max: 2.0, gamma: 2.5, phi: 0.5}
    tracking: {kp: 1.5, kv: 1.5}
    cbf: {lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0, lambda5: 1.0, lambda6: 1.0}
    vehicle: {preset: midsize, mass: 1200.0, beta0: 10.0, beta1: 1.0, beta2: 0.4}
    planning: {barrier_aware: false}
    admission: {max_entry_delay: 30.0, retry: 0.5}
"""

from __future__ import annotations

import math
from dataclasses import replace
from importlib import resources
from pathlib import Path as FsPath
from typing import Any, Callable, Optional

import yaml

from .barrier import CbfGains
from .dynamics import PRESETS
from .errors import ScenarioError
from .geometry import Path, default_intersection
from .planner import PlanningLimits
from .sim import ArrivalSpec, ScenarioConfig
from .tracking import TrackingGains

SCENARIO_PRESETS = ("paper-sec5", "noise-stress")


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _str(v):
    return isinstance(v, str)


def _bool(v):
    return isinstance(v, bool)


def _pair(v):
    return isinstance(v, list) and len(v) == 2 and all(_num(x) for x in v)


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_num(x) for x in v)


_SECTIONS: dict[str, dict[str, Callable[[Any], bool]]] = {
    "arrival": {"rate": _num, "count": _int, "mode": _str, "split": _num_list, "v0_range": _pair},
    "limits": {k: _num for k in ("v_min", "v_max", "u_min", "u_max", "gamma", "phi")},
    "tracking": {"kp": _num, "kv": _num},
    "cbf": {f"lambda{q}": _num for q in range(1, 7)},
    "vehicle": {"preset": _str, "mass": _num, "beta0": _num, "beta1": _num, "beta2": _num},
    "planning": {"barrier_aware": _bool},
    "admission": {"max_entry_delay": _num, "retry": _num},
}
_SCALARS: dict[str, Callable[[Any], bool]] = {
    "name": _str,
    "seed": _int,
    "dt": _num,
    "duration": _num,
    "substeps": _int,
    "noise_sigma": _num,
    "hold_feedforward": _bool,
    "geometry": _str,
}
_PATH_KEYS = {"id": _int, "length": _num, "conflicts": lambda v: isinstance(v, dict), "name": _str}


class _Located:
    """Map from key paths to source lines, built from the YAML node tree."""

    def __init__(self, node: Optional[yaml.Node], source: str):
        self.source = source
        self.lines: dict[tuple, int] = {}
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, prefix):
        self.lines[prefix] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                if k.tag.endswith(":int"):
                    key = int(key)
                self.lines[prefix + (key,)] = k.start_mark.line + 1
                self._walk(v, prefix + (key,))
                self.lines[prefix + (key,)] = k.start_mark.line + 1  # key line, not value line
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, prefix + (i,))

    def error(self, keys: tuple, message: str) -> ScenarioError:
        line = None
        for n in range(len(keys), -1, -1):
            if keys[:n] in self.lines:
                line = self.lines[keys[:n]]
                break
        where = f"{self.source}:{line}" if line is not None else self.source
        dotted = ".".join(str(k) for k in keys) or "<root>"
        return ScenarioError(f"{where}: {dotted}: {message}")


def _check_mapping(data, schema, keys, loc: _Located):
    if not isinstance(data, dict):
        raise loc.error(keys, "expected a mapping")
    for k, v in data.items():
        if k not in schema:
            raise loc.error(keys + (k,), f"unknown key (allowed: {', '.join(sorted(map(str, schema)))})")
        if not schema[k](v):
            raise loc.error(keys + (k,), f"invalid value {v!r}")


def _validate(data: dict, loc: _Located) -> None:
    top = dict(_SCALARS)
    top.update({name: lambda v: isinstance(v, dict) for name in _SECTIONS})
    top["paths"] = lambda v: isinstance(v, list) and len(v) > 0
    _check_mapping(data, top, (), loc)
    for name, schema in _SECTIONS.items():
        if name in data:
            _check_mapping(data[name], schema, (name,), loc)
    if "paths" in data and "geometry" in data:
        raise loc.error(("paths",), "give either `paths` or `geometry`, not both")
    if data.get("geometry", "default") != "default":
        raise loc.error(("geometry",), f"unknown geometry {data['geometry']!r} (only 'default')")
    for i, p in enumerate(data.get("paths", [])):
        _check_mapping(p, _PATH_KEYS, ("paths", i), loc)
        for key in ("id", "length"):
            if key not in p:
                raise loc.error(("paths", i), f"missing required key {key!r}")
        for n, d in p.get("conflicts", {}).items():
            if not _int(n) or not _num(d):
                raise loc.error(("paths", i, "conflicts", n), "conflict ids must be integers and distances numbers")
    preset = data.get("vehicle", {}).get("preset", "midsize")
    if preset not in PRESETS:
        raise loc.error(("vehicle", "preset"), f"unknown vehicle preset {preset!r} (known: {', '.join(PRESETS)})")
    mode = data.get("arrival", {}).get("mode", "exponential")
    if mode not in ("exponential", "uniform"):
        raise loc.error(("arrival", "mode"), f"unknown arrival mode {mode!r}")


def _make(loc: _Located, keys: tuple, build, *args, **kwargs):
    """Call a validating constructor, reporting its ValueError at ``keys``."""
    try:
        return build(*args, **kwargs)
    except ValueError as err:
        raise loc.error(keys, str(err)) from None


def _build(data: dict, loc: _Located) -> ScenarioConfig:
    if "paths" in data:
        paths = tuple(
            _make(
                loc,
                ("paths", i),
                Path,
                int(p["id"]),
                float(p["length"]),
                {int(n): float(d) for n, d in p.get("conflicts", {}).items()},
                p.get("name", ""),
            )
            for i, p in enumerate(data["paths"])
        )
        if len({p.id for p in paths}) != len(paths):
            raise loc.error(("paths",), "duplicate path id")
    else:
        paths = tuple(default_intersection().paths.values())

    arr = data.get("arrival", {})
    split = arr.get("split")
    if split is not None and len(split) != len(paths):
        raise loc.error(("arrival", "split"), f"needs {len(paths)} weights, one per path")
    if split is not None and (min(split) < 0 or sum(split) <= 0):
        raise loc.error(("arrival", "split"), "weights must be non-negative with a positive sum")
    arrivals = ArrivalSpec(
        rate=float(arr.get("rate", ArrivalSpec.rate)),
        count=int(arr.get("count", ArrivalSpec.count)),
        mode=arr.get("mode", ArrivalSpec.mode),
        split=None if split is None else tuple(float(w) for w in split),
        v0_range=tuple(float(x) for x in arr.get("v0_range", ArrivalSpec.v0_range)),
    )
    limits = _make(loc, ("limits",), PlanningLimits, **{k: float(v) for k, v in data.get("limits", {}).items()})
    tracking = _make(loc, ("tracking",), TrackingGains, **{k: float(v) for k, v in data.get("tracking", {}).items()})
    cbf = _make(
        loc,
        ("cbf",),
        CbfGains,
        **{k: float(v) for k, v in data.get("cbf", {}).items()},
        gamma=limits.gamma,
        phi=limits.phi,
        v_min=limits.v_min,
        v_max=limits.v_max,
    )
    veh = dict(data.get("vehicle", {}))
    preset = veh.pop("preset", "midsize")
    vehicle = _make(
        loc,
        ("vehicle",),
        replace,
        PRESETS[preset],
        **{k: float(v) for k, v in veh.items()},
        u_min=limits.u_min,
        u_max=limits.u_max,
    )
    plan = data.get("planning", {})
    adm = data.get("admission", {})
    lo, hi = arrivals.v0_range
    if not limits.v_min <= lo <= hi <= limits.v_max:
        raise loc.error(("arrival", "v0_range"), f"[{lo}, {hi}] must lie within [v_min, v_max] = [{limits.v_min}, {limits.v_max}]")
    return _make(
        loc,
        (),
        ScenarioConfig,
        paths=paths,
        seed=int(data.get("seed", 0)),
        dt=float(data.get("dt", 0.1)),
        duration=float(data.get("duration", 300.0)),
        substeps=int(data.get("substeps", 10)),
        arrivals=arrivals,
        limits=limits,
        tracking=tracking,
        cbf=cbf,
        vehicle=vehicle,
        vehicle_preset=preset,
        barrier_aware_planning=bool(plan.get("barrier_aware", False)),
        max_entry_delay=float(adm.get("max_entry_delay", 30.0)),
        entry_retry=float(adm.get("retry", 0.5)),
        noise_sigma=float(data.get("noise_sigma", 0.0)),
        hold_feedforward=bool(data.get("hold_feedforward", True)),
        name=data.get("name", "custom"),
    )


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    """Validate scenario text and build the config, with file:line diagnostics."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ScenarioError(f"{source}: not valid YAML: {err}") from None
    data = {} if data is None else data
    if isinstance(data, dict) and isinstance(data.get("paths"), list):
        # JSON (a manifest echo, say) can only write conflict ids as strings
        data["paths"] = [_int_conflict_keys(p) for p in data["paths"]]
    loc = _Located(node, source)
    _validate(data, loc)
    try:
        return _build(data, loc)
    except (ValueError, TypeError) as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(f"{source}: {err}") from None


def config_from_dict(data: dict, source: str = "<dict>") -> ScenarioConfig:
    """Build a config from an already-parsed mapping such as a manifest echo."""
    return parse_scenario(yaml.safe_dump(data, sort_keys=False), source)


def _int_conflict_keys(p):
    if not isinstance(p, dict) or not isinstance(p.get("conflicts"), dict):
        return p
    conv = {int(k) if isinstance(k, str) and k.lstrip("-").isdigit() else k: v for k, v in p["conflicts"].items()}
    return {**p, "conflicts": conv}


def load_scenario(path) -> ScenarioConfig:
    path = FsPath(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ScenarioError(f"{path}: cannot read scenario file: {err.strerror}") from None
    return parse_scenario(text, str(path))


def preset_text(name: str) -> str:
    if name not in SCENARIO_PRESETS:
        raise ScenarioError(f"unknown preset {name!r} (known: {', '.join(SCENARIO_PRESETS)})")
    return resources.files("cavsafe").joinpath("scenarios").joinpath(f"{name}.yaml").read_text()


def load_preset(name: str) -> ScenarioConfig:
    return parse_scenario(preset_text(name), f"preset:{name}")


def config_to_dict(config: ScenarioConfig) -> dict:
    """Full, explicit echo of a config; ``config_from_dict`` inverts it exactly."""
    lim, veh, cbf, arr = config.limits, config.vehicle, config.cbf, config.arrivals
    return {
        "name": config.name,
        "seed": config.seed,
        "dt": config.dt,
        "duration": config.duration,
        "substeps": config.substeps,
        "noise_sigma": config.noise_sigma,
        "hold_feedforward": config.hold_feedforward,
        "paths": [
            {
                "id": p.id,
                "length": p.length,
                "conflicts": {int(n): float(d) for n, d in p.conflict_distances.items()},
                "name": p.name,
            }
            for p in config.paths
        ],
        "arrival": {
            "rate": arr.rate,
            "count": arr.count,
            "mode": arr.mode,
            **({"split": list(arr.split)} if arr.split is not None else {}),
            "v0_range": list(arr.v0_range),
        },
        "limits": {k: getattr(lim, k) for k in ("v_min", "v_max", "u_min", "u_max", "gamma", "phi")},
        "tracking": {"kp": config.tracking.kp, "kv": config.tracking.kv},
        "cbf": {f"lambda{q}": getattr(cbf, f"lambda{q}") for q in range(1, 7)},
        "vehicle": {
            "preset": config.vehicle_preset,
            "mass": veh.mass,
            "beta0": veh.beta0,
            "beta1": veh.beta1,
            "beta2": veh.beta2,
        },
        "planning": {"barrier_aware": config.barrier_aware_planning},
        "admission": {"max_entry_delay": config.max_entry_delay, "retry": config.entry_retry},
    }
