"""Run configuration: a sectioned TOML document mapped onto the episode dataclasses."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .fitness import FitnessConfig
from .orchestrator import (
    EpisodeConfig,
    GpSettings,
    MonitorConfig,
    RlConfig,
    ScenarioConfig,
    SboSettings,
    StlConfig,
)
from .sim import VehicleParams
from .stl import StlSyntaxError, parse_formula, parse_predicate

REQUIRED_SECTIONS = ("vehicle", "scenario", "stl", "fitness", "sbo", "rl")
OPTIONAL_SECTIONS = ("gp", "monitor", "output")

# optional numbers; the string "none" disables them
_OPTIONAL_FLOATS = {
    ("scenario", "switch_time"),
    ("scenario", "change_time"),
    ("sbo", "p_min"),
    ("sbo", "settle_time"),
    ("sbo", "radius_margin"),
    ("monitor", "rearm_delay"),
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration plus output options and the source text."""

    episode: EpisodeConfig
    seed: int
    output_dir: Optional[str]
    emit_plotscript: bool
    text: str
    path: Optional[str] = None


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(section: str, key: str, value, default):
    where = f"[{section}].{key}"
    if (section, key) in _OPTIONAL_FLOATS:
        if value == "none":
            return None
        if not _is_number(value):
            raise ConfigError(f"{where} must be a number or \"none\"")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if not _is_number(value):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where} must be a non-empty array")
        kind = type(default[0]) if default else float
        if kind is str:
            if not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{where} must be an array of strings")
            return tuple(value)
        if kind is int:
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where} must be an array of integers")
            return tuple(value)
        if not all(_is_number(v) for v in value):
            raise ConfigError(f"{where} must be an array of numbers")
        return tuple(float(v) for v in value)
    raise ConfigError(f"{where} has an unsupported type")


def _build(section: str, cls, table: Dict[str, Any], skip=()):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown key [{section}].{key}")
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str, base_dir: str = ".", seed: Optional[int] = None, path: Optional[str] = None) -> RunConfig:
    """Validate and convert a configuration document.

    Raises
    ------
    ConfigError
        With the offending key path in the message.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    for name in doc:
        if name not in REQUIRED_SECTIONS + OPTIONAL_SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    for name in REQUIRED_SECTIONS:
        if name not in doc:
            raise ConfigError(f"missing section [{name}]")
    scen = dict(doc["scenario"])
    if "seed" not in scen and seed is None:
        raise ConfigError("missing key [scenario].seed")
    if seed is not None:
        scen["seed"] = seed

    rl_table = dict(doc["rl"])
    q0 = rl_table.pop("q0", None)
    r0 = rl_table.pop("r0", None)
    stl_table = dict(doc["stl"])
    spec_file = stl_table.pop("spec_file", None)
    if spec_file is not None:
        if "spec" in stl_table:
            raise ConfigError("[stl] takes either spec or spec_file, not both")
        full = os.path.join(base_dir, spec_file)
        if not os.path.isfile(full):
            raise ConfigError(f"[stl].spec_file: file not found: {full}")
        with open(full, encoding="utf-8") as fh:
            stl_table["spec"] = fh.read().strip()
    out_table = dict(doc.get("output", {}))
    out_dir = out_table.pop("dir", None)
    plot = out_table.pop("emit_plotscript", False)
    if out_table:
        raise ConfigError(f"unknown key [output].{next(iter(out_table))}")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("[output].dir must be a string")
    if not isinstance(plot, bool):
        raise ConfigError("[output].emit_plotscript must be true or false")

    base = EpisodeConfig()
    cfg = EpisodeConfig(
        vehicle=_build("vehicle", VehicleParams, doc["vehicle"]),
        scenario=_build("scenario", ScenarioConfig, scen),
        stl=_build("stl", StlConfig, stl_table),
        fitness=_build("fitness", FitnessConfig, {**_asdict(base.fitness), **doc["fitness"]}),
        gp=_build("gp", GpSettings, doc.get("gp", {})),
        rl=_build("rl", RlConfig, rl_table),
        sbo=_build("sbo", SboSettings, doc["sbo"]),
        monitor=_build("monitor", MonitorConfig, doc.get("monitor", {})),
        q0=base.q0 if q0 is None else _coerce("rl", "q0", q0, base.q0),
        r0=base.r0 if r0 is None else _coerce("rl", "r0", r0, base.r0),
    )
    n = len(cfg.q0)
    schema = [f"x{i + 1}" for i in range(n)] + [f"r{i + 1}" for i in range(n)] + ["r"]
    inputs = [f"u{j + 1}" for j in range(len(cfg.r0))]
    try:
        parse_formula(cfg.stl.spec, schema + inputs)
        for s in cfg.stl.safety:
            parse_predicate(s, schema)
    except StlSyntaxError as exc:
        raise ConfigError(f"[stl]: {exc}") from exc
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(cfg, cfg.scenario.seed, out_dir, plot, text, path)


def _asdict(obj) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def load_config(path: str, seed: Optional[int] = None) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"configuration file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)), seed, path)


def with_seed(rc: RunConfig, seed: int) -> RunConfig:
    ep = replace(rc.episode, scenario=replace(rc.episode.scenario, seed=seed))
    return replace(rc, episode=ep, seed=seed)
