"""Run configuration files (TOML, versioned schema).

A configuration selects either a built-in template::

    schema_version = 1
    [template]
    name = "fig2"
    [template.params]
    tau_us = 800.0

or an inline lattice plus sequence (``[lattice]``, ``[[lattice.sites]]``,
``[noise]``, ``[[sequence]]``). ``[scan]`` is the time axis written to the
series CSV; ``[sweep]`` is an optional outer axis, one report entry per
value. Scan and sweep parameters name a template parameter, or
``<segment name>.<field>`` for inline sequences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dynamics import NoiseModel
from .lattice import ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE, TWO_PI, IonSpecies, LatticeConfig, TrapSite
from .protocol import Cool, Detect, Excite, Hold, RampAngle, RampFrequency, Sequence
from .sequences import Template, builtin_sequences, sweep_grid

SCHEMA_VERSION = 1
ENGINES = ("rwa", "full")


class ConfigError(ValueError):
    """Unparseable or inconsistent configuration; the message names the field."""


def _err(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _get(table: dict, key: str, path: str, kind, default: Any = ...):
    if key not in table:
        if default is ...:
            _err(f"{path}.{key}" if path else key, "required field is missing")
        return default
    value = table[key]
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kinds) or (isinstance(value, bool) and bool not in kinds):
        names = "/".join(k.__name__ for k in kinds)
        _err(f"{path}.{key}" if path else key, f"expected {names}, got {type(value).__name__}")
    return value


def _check_keys(table: dict, allowed: set, path: str):
    extra = set(table) - allowed
    if extra:
        _err(path, f"unknown field(s) {sorted(extra)}")


@dataclass(frozen=True)
class Axis:
    parameter: str
    start: float
    stop: float
    step: float

    @property
    def values(self) -> np.ndarray:
        return sweep_grid(self.start, self.stop, self.step)

    def to_dict(self):
        return {"parameter": self.parameter, "start": self.start, "stop": self.stop, "step": self.step}


@dataclass(frozen=True)
class FitSpec:
    model: str = "auto"  # auto | exchange | multisine | none
    sites: tuple[int, ...] | None = None
    components: int | None = None
    shared_decay: bool = True
    label: str | None = None


@dataclass
class RunConfig:
    raw: dict
    template: Template | None = None
    params: dict = field(default_factory=dict)
    lattice: LatticeConfig | None = None
    noise: NoiseModel = field(default_factory=NoiseModel)
    segments: list = field(default_factory=list)
    reference_frequency: float | None = None
    engine: str = "rwa"
    repetitions: int = 300
    seed: int = 0
    scan: Axis | None = None
    sweep: Axis | None = None
    fit: FitSpec = field(default_factory=FitSpec)
    validate_options: dict = field(default_factory=dict)
    out: str | None = None

    # -- building sequences --------------------------------------------------

    def build(self, scan_value: float | None = None, sweep_value: float | None = None) -> Sequence:
        overrides = {}
        if self.scan is not None and scan_value is not None:
            overrides[self.scan.parameter] = scan_value
        if self.sweep is not None and sweep_value is not None:
            overrides[self.sweep.parameter] = sweep_value
        if self.template is not None:
            return self.template.build(**{**self.params, **overrides})
        segs = [dict(s) for s in self.segments]
        for key, value in overrides.items():
            name, fld = key.split(".", 1)
            for s in segs:
                if s.get("name") == name:
                    s[fld] = value
        return Sequence([_segment(s, f"sequence[{k}]", self.reference_frequency)
                         for k, s in enumerate(segs)], self.lattice, self.noise, self.reference_frequency)

    @property
    def final_label(self) -> str:
        if self.fit.label is not None:
            return self.fit.label
        if self.template is not None:
            return self.template.final_label
        labels = [s.get("label", "") for s in self.segments if s.get("type") == "detect"]
        return labels[-1] if labels else ""

    @property
    def fit_model(self) -> str:
        if self.fit.model != "auto":
            return self.fit.model
        if self.template is not None:
            return self.template.fit
        return "exchange"

    @property
    def fit_sites(self) -> tuple[int, ...] | None:
        if self.fit.sites is not None:
            return self.fit.sites
        if self.template is not None:
            return self.template.fit_sites
        return None

    def canonical(self) -> dict:
        """The effective configuration, including command-line overrides."""
        doc = json.loads(json.dumps(self.raw))
        doc["seed"] = self.seed
        doc["engine"] = self.engine
        doc["repetitions"] = self.repetitions
        return doc

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# -- parsing ---------------------------------------------------------------

def _species(table, path):
    _check_keys(table, {"species", "mass_u", "charge_e", "sites", "reference_frequency_mhz",
                        "vacuum_permittivity"}, path)
    name = table.get("species")
    if name is not None:
        if name.lower().replace("-", "") not in ("mg24", "magnesium24"):
            _err(f"{path}.species", f"unknown species {name!r}; give mass_u and charge_e instead")
        return IonSpecies.magnesium24()
    mass = _get(table, "mass_u", path, float)
    charge = _get(table, "charge_e", path, float, 1.0)
    try:
        return IonSpecies(mass * ATOMIC_MASS_UNIT, charge * ELEMENTARY_CHARGE)
    except ValueError as exc:
        _err(path, str(exc))


def _site(table, path):
    _check_keys(table, {"id", "position_um", "frequency_mhz", "angle_deg", "chi_hz", "phase"}, path)
    pos = _get(table, "position_um", path, list)
    if len(pos) not in (2, 3) or not all(isinstance(x, (int, float)) for x in pos):
        _err(f"{path}.position_um", "expected 2 or 3 numbers")
    try:
        return TrapSite(
            id=_get(table, "id", path, int),
            position=tuple(1e-6 * float(x) for x in pos),
            mode_frequency=TWO_PI * 1e6 * _get(table, "frequency_mhz", path, float),
            mode_angle=math.radians(_get(table, "angle_deg", path, float, 0.0)),
            anharmonic_coefficient=TWO_PI * _get(table, "chi_hz", path, float, 0.0),
            motional_phase=_get(table, "phase", path, float, 0.0),
        )
    except ValueError as exc:
        _err(path, str(exc))


def _lattice(table):
    species = _species(table, "lattice")
    sites = _get(table, "sites", "lattice", list)
    parsed = [_site(s, f"lattice.sites[{k}]") for k, s in enumerate(sites)]
    try:
        return LatticeConfig(species, tuple(parsed))
    except ValueError as exc:
        _err("lattice.sites", str(exc))


def _noise(table):
    path = "noise"
    _check_keys(table, {"dephasing_sigma_khz", "corr_time_us", "heating_per_ms", "detection_noise",
                        "correlated", "stochastic_heating"}, path)
    try:
        return NoiseModel(
            dephasing_sigma=TWO_PI * 1e3 * _get(table, "dephasing_sigma_khz", path, float, 0.0),
            dephasing_corr_time=1e-6 * _get(table, "corr_time_us", path, float, 1000.0),
            heating_rate=1e3 * _get(table, "heating_per_ms", path, float, 0.0),
            detection_noise=_get(table, "detection_noise", path, float, 0.0),
            correlated=_get(table, "correlated", path, bool, False),
            stochastic_heating=_get(table, "stochastic_heating", path, bool, False),
        )
    except ValueError as exc:
        _err(path, str(exc))


_SEGMENT_FIELDS = {
    "cool": {"target"},
    "excite": {"site", "amplitude", "phase"},
    "ramp_frequency": {"site", "target_mhz", "target_offset_khz", "duration_us", "concurrent"},
    "ramp_angle": {"site", "target_deg", "duration_us", "concurrent"},
    "hold": {"duration_us"},
    "detect": {"sites", "label"},
}


def _segment(table, path, reference_frequency):
    kind = _get(table, "type", path, str)
    if kind not in _SEGMENT_FIELDS:
        _err(f"{path}.type", f"unknown segment type {kind!r}; expected one of {sorted(_SEGMENT_FIELDS)}")
    _check_keys(table, _SEGMENT_FIELDS[kind] | {"type", "name"}, path)
    try:
        if kind == "cool":
            target = table.get("target", 20.0)
            return Cool(tuple(float(x) for x in target) if isinstance(target, list) else float(target))
        if kind == "excite":
            return Excite(_get(table, "site", path, int), _get(table, "amplitude", path, float),
                          _get(table, "phase", path, float, 0.0))
        if kind == "ramp_frequency":
            if ("target_mhz" in table) == ("target_offset_khz" in table):
                _err(path, "give exactly one of target_mhz and target_offset_khz")
            if "target_mhz" in table:
                target = TWO_PI * 1e6 * _get(table, "target_mhz", path, float)
            else:
                if reference_frequency is None:
                    _err(path, "target_offset_khz needs lattice.reference_frequency_mhz")
                target = reference_frequency + TWO_PI * 1e3 * _get(table, "target_offset_khz", path, float)
            return RampFrequency(_get(table, "site", path, int), target,
                                 1e-6 * _get(table, "duration_us", path, float),
                                 _get(table, "concurrent", path, bool, False))
        if kind == "ramp_angle":
            return RampAngle(_get(table, "site", path, int), math.radians(_get(table, "target_deg", path, float)),
                             1e-6 * _get(table, "duration_us", path, float),
                             _get(table, "concurrent", path, bool, False))
        if kind == "hold":
            return Hold(1e-6 * _get(table, "duration_us", path, float))
        return Detect(tuple(_get(table, "sites", path, list)), _get(table, "label", path, str, ""))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        _err(path, str(exc))


def _axis(table, path):
    _check_keys(table, {"parameter", "start", "stop", "step"}, path)
    start = _get(table, "start", path, float)
    stop = _get(table, "stop", path, float, start)
    step = _get(table, "step", path, float, 0.0)
    if stop < start:
        _err(path, f"stop ({stop}) must not be below start ({start})")
    if stop > start and not step > 0:
        _err(f"{path}.step", "must be positive when stop > start")
    return Axis(_get(table, "parameter", path, str), start, stop, step)


def parse_config(doc: dict) -> RunConfig:
    """Validate a decoded TOML document and build a :class:`RunConfig`."""
    _check_keys(doc, {"schema_version", "seed", "engine", "repetitions", "template", "lattice", "noise",
                      "sequence", "scan", "sweep", "fit", "validate", "output"}, "<root>")
    version = _get(doc, "schema_version", "", int)
    if version != SCHEMA_VERSION:
        _err("schema_version", f"unsupported version {version}; this build reads {SCHEMA_VERSION}")
    cfg = RunConfig(raw=doc)
    cfg.seed = _get(doc, "seed", "", int, 0)
    cfg.engine = _get(doc, "engine", "", str, "rwa")
    if cfg.engine not in ENGINES:
        _err("engine", f"expected one of {ENGINES}")
    cfg.repetitions = _get(doc, "repetitions", "", int, 300)
    if cfg.repetitions < 1:
        _err("repetitions", "must be at least 1")

    if ("template" in doc) == ("sequence" in doc):
        _err("<root>", "give exactly one of [template] and [[sequence]]")
    if "template" in doc:
        t = _get(doc, "template", "", dict)
        _check_keys(t, {"name", "params"}, "template")
        name = _get(t, "name", "template", str)
        templates = builtin_sequences()
        if name not in templates:
            _err("template.name", f"unknown template {name!r}; expected one of {sorted(templates)}")
        cfg.template = templates[name]
        params = _get(t, "params", "template", dict, {})
        for k, v in params.items():
            if k not in cfg.template.defaults:
                _err(f"template.params.{k}", f"unknown parameter; known: {sorted(cfg.template.defaults)}")
            if not isinstance(v, (int, float)):
                _err(f"template.params.{k}", "expected a number")
        cfg.params = {k: float(v) for k, v in params.items()}
        for key in ("lattice", "noise"):
            if key in doc:
                _err(key, "not allowed together with [template]")
    else:
        lat = _get(doc, "lattice", "", dict)
        cfg.lattice = _lattice(lat)
        if "reference_frequency_mhz" in lat:
            cfg.reference_frequency = TWO_PI * 1e6 * _get(lat, "reference_frequency_mhz", "lattice", float)
        cfg.noise = _noise(_get(doc, "noise", "", dict, {}))
        cfg.segments = _get(doc, "sequence", "", list)
        ids = {s.id for s in cfg.lattice.sites}
        names = set()
        for k, s in enumerate(cfg.segments):
            seg = _segment(s, f"sequence[{k}]", cfg.reference_frequency)
            for site in getattr(seg, "sites", ()) or ((seg.site,) if hasattr(seg, "site") else ()):
                if site not in ids:
                    _err(f"sequence[{k}]", f"site {site} is not in the lattice")
            if "name" in s:
                names.add(s["name"])

    for key in ("scan", "sweep"):
        if key in doc:
            axis = _axis(_get(doc, key, "", dict), key)
            if cfg.template is not None:
                if axis.parameter not in cfg.template.defaults:
                    _err(f"{key}.parameter", f"unknown template parameter {axis.parameter!r}")
            else:
                name, _, fld = axis.parameter.partition(".")
                if name not in names or not fld:
                    _err(f"{key}.parameter", "expected '<segment name>.<field>' naming a segment")
            setattr(cfg, key, axis)
    if cfg.scan is None and cfg.template is not None:
        a, b, s = cfg.template.sweep_range
        cfg.scan = Axis(cfg.template.sweep, a, b, s)
    if cfg.scan is not None and not cfg.scan.parameter.endswith("_us"):
        _err("scan.parameter", "the scan axis must be a duration in microseconds (name ending in _us)")

    if "fit" in doc:
        f = _get(doc, "fit", "", dict)
        _check_keys(f, {"model", "sites", "components", "shared_decay", "label"}, "fit")
        model = _get(f, "model", "fit", str, "auto")
        if model not in ("auto", "exchange", "multisine", "none"):
            _err("fit.model", "expected auto, exchange, multisine or none")
        sites = f.get("sites")
        cfg.fit = FitSpec(model, None if sites is None else tuple(int(x) for x in sites),
                          _get(f, "components", "fit", int, None),
                          _get(f, "shared_decay", "fit", bool, True),
                          _get(f, "label", "fit", str, None))
    if "validate" in doc:
        v = _get(doc, "validate", "", dict)
        _check_keys(v, {"c_slow", "c_fast", "enforce_grid", "grid_khz"}, "validate")
        opts = {}
        for k in ("c_slow", "c_fast"):
            if k in v:
                opts[k] = _get(v, k, "validate", float)
        if "enforce_grid" in v:
            opts["enforce_grid"] = _get(v, "enforce_grid", "validate", bool)
        if "grid_khz" in v:
            opts["grid"] = TWO_PI * 1e3 * _get(v, "grid_khz", "validate", float)
        cfg.validate_options = opts
    if "output" in doc:
        o = _get(doc, "output", "", dict)
        _check_keys(o, {"dir"}, "output")
        cfg.out = _get(o, "dir", "output", str, None)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def template_config(name: str, **params) -> RunConfig:
    return parse_config({"schema_version": SCHEMA_VERSION, "template": {"name": name, "params": params}})
