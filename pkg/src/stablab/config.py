"""Flat ``key = value`` scenario configuration.

Lines are ``key = value``; ``#`` starts a comment; dotted keys group
settings (``domain.h = 0.04``).  Every key has a type and a default, and the
resolved configuration (defaults included) is echoed into run reports.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .coeff import CoefficientFamily, family_from_name
from .fem import ScalarFunction
from .mesh import DomainSpec, MeshError

__all__ = ["ConfigError", "ScenarioConfig", "SCENARIOS", "parse_config", "load_config",
           "parse_domain_spec", "make_nonlinearity"]

SCENARIOS = ("neumann-rigidity", "dumbbell", "robin-certificate", "identity-suite", "manufactured")


class ConfigError(ValueError):
    def __init__(self, message, line: Optional[int] = None, source: str = "config"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); None defaults mean "unset"
_SCHEMA = {
    "scenario": (str, None),
    "output_dir": (str, "stablab-out"),
    "seed": (int, 0),
    "mesh_levels": (int, 3),
    "robin_alpha": (float, None),
    "domain.kind": (str, None),
    "domain.h": (float, 0.08),
    "domain.radius": (float, 1.0),
    "domain.inner_radius": (float, 0.5),
    "domain.half_axes": (_floats, (1.0, 0.5)),
    "domain.width": (float, 1.0),
    "domain.height": (float, 1.0),
    "domain.origin": (_floats, (0.0, 0.0)),
    "domain.rounding": (float, 0.05),
    "domain.bulb_radius": (float, 1.0),
    "domain.neck_width": (float, 0.1),
    "domain.neck_length": (float, 1.0),
    "domain.flare_height": (float, 0.5),
    "domain.flare_length": (float, 0.5),
    "domain.path": (str, None),
    "family.name": (str, "laplacian"),
    "family.p": (float, None),
    "family.path": (str, None),
    "nonlinearity.name": (str, None),
    "nonlinearity.scale": (float, None),
    "nonlinearity.lambda": (float, 0.0),
    "nonlinearity.shift": (float, 0.0),
    "nonlinearity.coefficients": (_floats, ()),
    "seeds.count": (int, 10),
    "seeds.amplitude_min": (float, 0.5),
    "seeds.amplitude_max": (float, 1.0),
    "seeds.offset_max": (float, 0.3),
    "seeds.wavenumber_min": (float, 1.5),
    "seeds.wavenumber_max": (float, 4.0),
    "seeds.constants": (_floats, (-0.9, 0.0, 0.9)),
    "seeds.blend_width": (float, 0.2),
    "newton.max_iterations": (int, 50),
    "newton.tolerance": (float, 1e-10),
    "newton.continuation_steps": (int, 1),
    "rigidity.delta_const": (float, 1e-4),
    "rigidity.weakly_convex": (_bool, False),
    "poincare.samples": (int, 20),
    "poincare.C": (float, 1.0),
    "lemconvex.C": (float, 1.0),
    "robin.modes": (int, 6),
    "robin.frame_mode": (int, 3),
    "robin.sweep_alphas": (_floats, ()),
    "robin.max_ratio": (float, 0.65),
    "identity.field": (str, None),
    "identity.max_ratio": (float, 0.65),
    "manufactured.quadratic_C": (float, 1e4),
    "manufactured.conservation_tol": (float, 1e-8),
}

# scenario-specific defaults applied when the key is absent
_SCENARIO_DEFAULTS = {
    "neumann-rigidity": {"domain.kind": "disk", "nonlinearity.name": "bistable",
                         "nonlinearity.scale": 10.0},
    "dumbbell": {"domain.kind": "dumbbell", "nonlinearity.name": "bistable",
                 "nonlinearity.scale": 1.0},
    "robin-certificate": {"domain.kind": "disk", "nonlinearity.name": "linear"},
    "identity-suite": {"domain.kind": "disk", "nonlinearity.name": "zero",
                       "identity.field": "sincosh"},
    "manufactured": {"domain.kind": "disk", "nonlinearity.name": "polynomial",
                     "nonlinearity.coefficients": (0.0, -1.0, 0.0, -1.0),
                     "newton.tolerance": 1e-12},
}

_REQUIRED = {"robin-certificate": ("robin_alpha",)}

IDENTITY_FIELDS = ("radial", "sincosh", "linear", "saddle")


@dataclass
class ScenarioConfig:
    scenario: str
    domain: DomainSpec
    family: CoefficientFamily
    nonlinearity: ScalarFunction
    robin_alpha: Optional[float]
    mesh_levels: int
    seed: int
    output_dir: str
    values: dict = field(default_factory=dict)  # every resolved key

    def get(self, key):
        return self.values[key]

    def level_h(self, level: int) -> float:
        return self.domain.h / 2**level

    def domain_at(self, level: int) -> DomainSpec:
        return dataclasses.replace(self.domain, h=self.level_h(level))

    def echo(self) -> dict:
        return {f"config.{k}": _show(v) for k, v in sorted(self.values.items())}


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def make_nonlinearity(values: dict) -> ScalarFunction:
    name = values["nonlinearity.name"]
    if name == "zero":
        return ScalarFunction.zero()
    if name == "linear":
        return ScalarFunction.linear(values["nonlinearity.lambda"], values["nonlinearity.shift"])
    if name == "bistable":
        return ScalarFunction.bistable(values["nonlinearity.scale"] or 1.0)
    if name == "polynomial":
        coeffs = values["nonlinearity.coefficients"]
        if not coeffs:
            raise ValueError("polynomial nonlinearity needs nonlinearity.coefficients")
        return ScalarFunction.polynomial(coeffs)
    raise ValueError(f"unknown nonlinearity {name!r} (zero, linear, bistable, polynomial)")


def parse_config(text: str, source: str = "config", overrides: Optional[dict] = None) -> ScenarioConfig:
    raw, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno, source)
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno, source)
        raw[key], lines[key] = value, lineno
    values = {}
    for key, text_value in raw.items():
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(text_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lines[key], source) from None
    for key, value in (overrides or {}).items():
        values[key] = value
    scenario = values.get("scenario")
    if scenario is None:
        raise ConfigError("missing required key 'scenario'", None, source)
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}",
                          lines.get("scenario"), source)
    for key, value in _SCENARIO_DEFAULTS[scenario].items():
        values.setdefault(key, value)
    for key, (_, default) in _SCHEMA.items():
        values.setdefault(key, default)
    for key in _REQUIRED.get(scenario, ()):
        if values[key] is None:
            raise ConfigError(f"scenario {scenario} requires {key!r}", None, source)
    if values["mesh_levels"] < 1:
        raise ConfigError("mesh_levels must be >= 1", lines.get("mesh_levels"), source)
    if scenario == "identity-suite" and values["identity.field"] not in IDENTITY_FIELDS:
        raise ConfigError(f"identity.field must be one of {', '.join(IDENTITY_FIELDS)}",
                          lines.get("identity.field"), source)
    if not 0 <= values["seed"] < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer", lines.get("seed"), source)

    domain = DomainSpec(
        kind=values["domain.kind"], h=values["domain.h"], radius=values["domain.radius"],
        inner_radius=values["domain.inner_radius"], half_axes=values["domain.half_axes"],
        width=values["domain.width"], height=values["domain.height"],
        origin=values["domain.origin"], rounding=values["domain.rounding"],
        bulb_radius=values["domain.bulb_radius"], neck_width=values["domain.neck_width"],
        neck_length=values["domain.neck_length"], flare_height=values["domain.flare_height"],
        flare_length=values["domain.flare_length"], path=values["domain.path"],
    )
    try:
        domain.check()
    except MeshError as exc:
        raise ConfigError(str(exc), lines.get("domain.kind"), source) from None
    params = {}
    if values["family.p"] is not None:
        params["p"] = values["family.p"]
    if values["family.path"] is not None:
        params["path"] = values["family.path"]
    try:
        family = family_from_name(values["family.name"], **params)
        nonlinearity = make_nonlinearity(values)
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc), None, source) from None
    return ScenarioConfig(
        scenario=scenario, domain=domain, family=family, nonlinearity=nonlinearity,
        robin_alpha=values["robin_alpha"], mesh_levels=values["mesh_levels"],
        seed=values["seed"], output_dir=values["output_dir"], values=values,
    )


def load_config(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from None
    return parse_config(text, source=str(path), overrides=overrides)


def parse_domain_spec(text: str) -> DomainSpec:
    """``kind[:key=value,...]``, e.g. ``dumbbell:h=0.04,neck_width=0.1``."""
    kind, _, rest = text.partition(":")
    kwargs = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value in domain spec, got {item!r}", None, "domain-spec")
        key = key.strip()
        full = f"domain.{key}"
        if full not in _SCHEMA or key == "kind":
            raise ConfigError(f"unknown domain parameter {key!r}", None, "domain-spec")
        try:
            kwargs[key] = _SCHEMA[full][0](value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", None, "domain-spec") from None
    spec = DomainSpec(kind=kind.strip(), **kwargs)
    try:
        spec.check()
    except MeshError as exc:
        raise ConfigError(str(exc), None, "domain-spec") from None
    return spec
