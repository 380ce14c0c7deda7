"""Run configuration: flat key-value text with sections.

The format is INI-like: `[section]` headers, `key = value` lines, `#`
comments.  Scalars are plain numbers or true/false; vectors are
whitespace-separated numbers; lists of points are semicolon-separated
vectors.  Unknown sections or keys are rejected with the offending line.
Every key has a documented default, so an empty file is a valid
configuration describing the reference setup (a 10x10x10 arena with four
unit obstacles resting on the floor, 2000 agents, an 11-cell grid).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "canonical_dump", "config_hash"]

DEFAULT_OBSTACLE_CENTERS = (
    (2.5, 2.5, -4.0),
    (2.5, -2.5, -4.0),
    (-2.5, 2.5, -4.0),
    (-2.5, -2.5, -4.0),
)


class ConfigError(ValueError):
    """Invalid configuration; carries a line-precise location when known."""

    def __init__(self, message: str, path: str = "<config>", line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


@dataclass
class WorkspaceConfig:
    outer_half_width: float = 5.0
    obstacle_centers: tuple = DEFAULT_OBSTACLE_CENTERS
    obstacle_half_widths: tuple = (1.0, 1.0, 1.0, 1.0)


@dataclass
class GridConfig:
    cells_per_axis: int = 11


@dataclass
class BoidsConfig:
    count: int = 2000
    dt: float = 1e-3
    total_time: float = 4.0
    sample_every: int = 50
    seed: int = 7
    position_mean: tuple = (0.0, 0.0, 0.0)
    position_std: float = 1.0
    velocity_mean: tuple = (0.0, 0.0, 0.0)
    velocity_std: float = 1.0


@dataclass
class InitFitConfig:
    hidden_widths: tuple = (50, 50)
    steps: int = 5000
    base_rate: float = 1e-2
    seed: int = 11


@dataclass
class IdentConfig:
    max_newton: int = 15
    max_cg: int = 10
    cg_tol: float = 0.1
    h_rel: float = 1e-4
    hessvec_rel: float = 1e-3
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 25
    gtol: float = 1e-8
    scale_floor: float = 1e-8
    workers: int = 1
    sentinel_loss: float = 10.0
    cfl: float = 0.05
    dt_max: float = 0.01
    start_params: tuple = (1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


@dataclass
class TwinConfig:
    enabled: bool = False
    true_params: tuple = (1.0, -0.8, 0.5, 1.0, 1.0, 1.0, 1.2, 2.0, 1.0, 0.8)
    start_scale: float = 1.2
    t0: float = 0.0
    tf: float = 0.4
    obs_dt: float = 0.05
    blob_center: tuple = (0.0, 0.0, 2.0)
    blob_std: float = 1.0
    flow: tuple = (0.5, 0.25, 0.0)


@dataclass
class EvaluateConfig:
    params_file: str = ""


@dataclass
class OutputConfig:
    directory: str = "out"


@dataclass
class RunConfig:
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    boids: BoidsConfig = field(default_factory=BoidsConfig)
    initfit: InitFitConfig = field(default_factory=InitFitConfig)
    ident: IdentConfig = field(default_factory=IdentConfig)
    twin: TwinConfig = field(default_factory=TwinConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {
    "workspace": WorkspaceConfig,
    "grid": GridConfig,
    "boids": BoidsConfig,
    "initfit": InitFitConfig,
    "ident": IdentConfig,
    "twin": TwinConfig,
    "evaluate": EvaluateConfig,
    "output": OutputConfig,
}


def _parse_scalar(text: str, kind: type):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    raise ValueError(f"unsupported scalar type {kind}")


def _parse_value(text: str, default):
    """Parse `text` with the type shape of the default value."""
    if isinstance(default, bool):
        return _parse_scalar(text, bool)
    if isinstance(default, int):
        return _parse_scalar(text, int)
    if isinstance(default, float):
        return _parse_scalar(text, float)
    if isinstance(default, str):
        return text.strip()
    if isinstance(default, tuple):
        if len(default) and isinstance(default[0], tuple):
            rows = [r.strip() for r in text.split(";") if r.strip()]
            return tuple(tuple(float(v) for v in row.split()) for row in rows)
        inner = int if (len(default) and isinstance(default[0], int)
                        and not isinstance(default[0], bool)) else float
        return tuple(inner(v) for v in text.split())
    raise ValueError(f"unsupported config value type for default {default!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        if len(value) and isinstance(value[0], tuple):
            return "; ".join(" ".join(_format_value(v) for v in row) for row in value)
        return " ".join(_format_value(v) for v in value)
    raise ValueError(f"cannot format config value {value!r}")


def _find_line(text: str, section: str, key: str | None = None) -> int | None:
    in_section = section is None
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            in_section = stripped[1:-1].strip() == section
            if in_section and key is None:
                return ln
            continue
        if in_section and key is not None:
            name = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return ln
    return None


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc.message if hasattr(exc, "message") else exc), path, line) from exc

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, _find_line(text, section))
        target = getattr(cfg, section)
        known = {f.name: f for f in dc_fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]",
                                  path, _find_line(text, section, key))
            default = getattr(type(target)(), key)
            try:
                setattr(target, key, _parse_value(raw, default))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}",
                                  path, _find_line(text, section, key)) from exc
    _validate(cfg, path)
    return cfg


def _validate(cfg: RunConfig, path: str) -> None:
    def bad(msg):
        raise ConfigError(msg, path)

    if cfg.workspace.outer_half_width <= 0:
        bad("workspace.outer_half_width must be positive")
    if len(cfg.workspace.obstacle_centers) != len(cfg.workspace.obstacle_half_widths):
        bad("need one obstacle half-width per center")
    if cfg.grid.cells_per_axis < 1:
        bad("grid.cells_per_axis must be at least 1")
    if cfg.boids.count < 0:
        bad("boids.count must be nonnegative")
    if cfg.boids.dt <= 0 or cfg.boids.total_time < 0:
        bad("boids.dt must be positive and total_time nonnegative")
    if cfg.boids.sample_every < 1:
        bad("boids.sample_every must be at least 1")
    if cfg.boids.position_std <= 0 or cfg.boids.velocity_std <= 0:
        bad("boids standard deviations must be positive")
    if cfg.initfit.steps < 1 or cfg.initfit.base_rate <= 0:
        bad("initfit.steps must be >= 1 and base_rate positive")
    if len(cfg.ident.start_params) != 10:
        bad("ident.start_params must have 10 entries")
    if len(cfg.twin.true_params) != 10:
        bad("twin.true_params must have 10 entries")
    if cfg.twin.tf <= cfg.twin.t0:
        bad("twin.tf must exceed twin.t0")
    if cfg.twin.obs_dt <= 0:
        bad("twin.obs_dt must be positive")
    if cfg.ident.workers < 1:
        bad("ident.workers must be at least 1")


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), path)


def canonical_dump(cfg: RunConfig) -> str:
    """Stable text form: fixed section order, sorted keys, round-trip
    float formatting.  parse(canonical_dump(c)) reproduces c."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        target = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for name in sorted(f.name for f in dc_fields(cls)):
            out.write(f"{name} = {_format_value(getattr(target, name))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_dump(cfg).encode()).hexdigest()
