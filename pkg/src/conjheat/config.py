"""Scenario configuration: parsing and validation of the JSON config files.

A scenario names a backend, terminal data, resolutions, the checks to run
and their tolerances.  Validation errors carry the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

__all__ = ["ScenarioConfig", "ConfigError", "load_config", "CHECK_NAMES"]

CHECK_NAMES = (
    "gradient",
    "hessian",
    "lemma21",
    "lemma31",
    "lemma33",
    "lemma34",
    "bochner",
    "entropy",
    "curvature-evolution",
)

BACKEND_KINDS = ("torus-1d", "torus-2d", "shrinking-sphere", "rotsym-surface")
TERMINAL_KINDS = ("constant", "periodized-gaussian", "gaussian-mixture", "exp-cos", "product-exp-cos")
PROFILE_KINDS = ("round", "cos-theta", "legendre-2")
SCHEMES = ("crank-nicolson", "implicit-euler")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


def _need(mapping, key, path, typ=None):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}", "required field is missing")
    value = mapping[key]
    if typ is not None and not isinstance(value, typ):
        raise ConfigError(f"{path}.{key}", f"expected {typ}, got {type(value).__name__}")
    return value


def _positive(value, path):
    if not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(path, f"expected a positive number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    backend: dict
    terminal: dict | None
    T: float
    time_steps: int
    scheme: str
    alpha: float
    eps: float
    checks: tuple
    tolerances: dict
    cube: dict | None
    constants: dict
    tau_offset: float
    seed: int
    time_refinement_factor: int
    strict_normalization: bool
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def needs_history(self) -> bool:
        return any(c != "curvature-evolution" for c in self.checks)


def _validate_backend(spec, T) -> dict:
    kind = _need(spec, "kind", "backend", str)
    if kind not in BACKEND_KINDS:
        raise ConfigError("backend.kind", f"unknown backend {kind!r}; expected one of {BACKEND_KINDS}")
    if kind == "torus-1d":
        _positive(_need(spec, "length", "backend"), "backend.length")
        if int(_need(spec, "grid_size", "backend", int)) < 16:
            raise ConfigError("backend.grid_size", "must be >= 16")
    elif kind == "torus-2d":
        lengths = _need(spec, "lengths", "backend", list)
        sizes = _need(spec, "grid_sizes", "backend", list)
        if len(lengths) != 2 or len(sizes) != 2:
            raise ConfigError("backend.lengths", "torus-2d needs two lengths and two grid sizes")
    elif kind == "shrinking-sphere":
        n = _need(spec, "n", "backend", int)
        if n < 2:
            raise ConfigError("backend.n", "sphere dimension must be >= 2")
        r0 = _positive(_need(spec, "r0", "backend"), "backend.r0")
        if not T < r0 ** 2 / (2.0 * (n - 1)):
            raise ConfigError("T", f"must be below r0^2 / (2(n-1)) = {r0**2/(2*(n-1)):.6g}")
        _need(spec, "grid_size", "backend", int)
    else:
        _need(spec, "grid_size", "backend", int)
        profile = _need(spec, "initial_profile", "backend", dict)
        pkind = _need(profile, "kind", "backend.initial_profile", str)
        if pkind not in PROFILE_KINDS:
            raise ConfigError(
                "backend.initial_profile.kind",
                f"unknown profile {pkind!r}; expected one of {PROFILE_KINDS}",
            )
        if pkind != "round":
            _need(profile, "amplitude", "backend.initial_profile")
        steps = _need(spec, "flow_time_steps", "backend", int)
        store = spec.get("store_every", 1)
        if steps % store != 0:
            raise ConfigError("backend.flow_time_steps", "must be a multiple of store_every")
    return dict(spec)


def _validate_terminal(spec, backend_kind) -> dict:
    kind = _need(spec, "kind", "terminal", str)
    if kind not in TERMINAL_KINDS:
        raise ConfigError("terminal.kind", f"unknown terminal {kind!r}; expected one of {TERMINAL_KINDS}")
    if kind == "periodized-gaussian":
        if backend_kind not in ("torus-1d",):
            raise ConfigError("terminal.kind", "periodized-gaussian needs the torus-1d backend")
        _positive(_need(spec, "variance", "terminal"), "terminal.variance")
    if kind == "gaussian-mixture":
        if backend_kind != "torus-1d":
            raise ConfigError("terminal.kind", "gaussian-mixture needs the torus-1d backend")
        comps = _need(spec, "components", "terminal", list)
        if not comps:
            raise ConfigError("terminal.components", "needs at least one component")
        for i, comp in enumerate(comps):
            _positive(_need(comp, "variance", f"terminal.components[{i}]"), f"terminal.components[{i}].variance")
            _positive(_need(comp, "weight", f"terminal.components[{i}]"), f"terminal.components[{i}].weight")
    if kind == "exp-cos" and backend_kind != "torus-1d":
        raise ConfigError("terminal.kind", "exp-cos needs the torus-1d backend")
    if kind == "product-exp-cos" and backend_kind != "torus-2d":
        raise ConfigError("terminal.kind", "product-exp-cos needs the torus-2d backend")
    return dict(spec)


def validate_config(raw: dict) -> ScenarioConfig:
    name = _need(raw, "name", "config", str)
    T = _positive(_need(raw, "T", "config"), "T")
    backend = _validate_backend(_need(raw, "backend", "config", dict), T)

    checks = _need(raw, "checks", "config", list)
    for i, check in enumerate(checks):
        if check not in CHECK_NAMES:
            raise ConfigError(f"checks[{i}]", f"unknown check {check!r}; expected one of {CHECK_NAMES}")
    kind = backend["kind"]
    for i, check in enumerate(checks):
        if check == "curvature-evolution" and kind != "rotsym-surface":
            raise ConfigError(f"checks[{i}]", "curvature-evolution runs on the rotsym-surface backend only")
        if check in ("lemma33", "lemma34") and kind == "shrinking-sphere" and backend.get("n", 2) > 2:
            raise ConfigError(f"checks[{i}]", f"{check} supports the sphere backend only for n = 2")

    needs_history = any(c != "curvature-evolution" for c in checks)
    terminal = raw.get("terminal")
    if needs_history:
        if terminal is None:
            raise ConfigError("terminal", "required when any check consumes the solved history")
        terminal = _validate_terminal(terminal, kind)
    time_steps = raw.get("time_steps", 0)
    if needs_history and (not isinstance(time_steps, int) or time_steps < 8):
        raise ConfigError("time_steps", f"must be an integer >= 8, got {time_steps!r}")

    scheme = raw.get("scheme", "crank-nicolson")
    if scheme not in SCHEMES:
        raise ConfigError("scheme", f"unknown scheme {scheme!r}; expected one of {SCHEMES}")

    alpha = float(raw.get("alpha", 2.0))
    if alpha <= 1.0:
        raise ConfigError("alpha", f"must exceed 1, got {alpha}")
    eps = _positive(raw.get("eps", 1.0), "eps")

    tolerances = raw.get("tolerances", {})
    if not isinstance(tolerances, dict):
        raise ConfigError("tolerances", "expected a mapping of check name to tolerance")
    for key in tolerances:
        if key.split(".")[0] not in CHECK_NAMES and key != "oracle":
            raise ConfigError(f"tolerances.{key}", "does not name a configured check")

    cube = raw.get("cube")
    if cube is not None:
        _positive(_need(cube, "r", "cube"), "cube.r")
        _need(cube, "x0", "cube")
        t0 = _positive(_need(cube, "t0", "cube"), "cube.t0")
        Tp = _positive(_need(cube, "Tprime", "cube"), "cube.Tprime")
        if t0 > T:
            raise ConfigError("cube.t0", "cube end time lies beyond T")
        del Tp

    constants = raw.get("constants", {"policy": "report-only"})
    policy = constants.get("policy", "report-only")
    if policy not in ("report-only", "assert"):
        raise ConfigError("constants.policy", f"unknown policy {policy!r}")

    tau_offset = float(raw.get("tau_offset", 0.0))
    if tau_offset < 0.0:
        raise ConfigError("tau_offset", "must be nonnegative")

    factor = raw.get("time_refinement_factor", 4 if kind == "torus-1d" else 2)
    if factor not in (2, 4):
        raise ConfigError("time_refinement_factor", f"must be 2 or 4, got {factor!r}")

    return ScenarioConfig(
        name=name,
        backend=backend,
        terminal=terminal,
        T=T,
        time_steps=int(time_steps) if needs_history else 0,
        scheme=scheme,
        alpha=alpha,
        eps=eps,
        checks=tuple(checks),
        tolerances=dict(tolerances),
        cube=None if cube is None else dict(cube),
        constants=dict(constants),
        tau_offset=tau_offset,
        seed=int(raw.get("seed", 0)),
        time_refinement_factor=factor,
        strict_normalization=bool(raw.get("strict_normalization", False)),
        raw=raw,
    )


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return validate_config(raw)
