"""Pipeline configuration: ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored; unknown keys are errors.
Lists are comma separated. Paths are resolved against the config file's
directory.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from stmrf.core import DEFAULT_CLASSES, ClassSet
from stmrf.inference import LbpConfig
from stmrf.synth import DEFAULT_DATES
from stmrf.texture import GlcmConfig


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _dates(s: str) -> tuple[dt.date, ...]:
    return tuple(dt.date.fromisoformat(x.strip()) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "all", "none") else int(s)


def _float_or_inf(s: str) -> float:
    return math.inf if s.strip().lower() in ("inf", "off") else float(s)


_date_text = ",".join(d.isoformat() for d in DEFAULT_DATES)

# key -> (default text, parser)
SCHEMA: dict[str, tuple[str, Callable[[str], Any]]] = {
    "classes.names": (",".join(DEFAULT_CLASSES), _names),
    "scenario.height": ("128", int),
    "scenario.width": ("128", int),
    "scenario.dates": (_date_text, _dates),
    "scenario.n_patches": ("48", int),
    "scenario.n_water": ("2", int),
    "scenario.looks": ("4", _float_or_inf),
    "scenario.patch_jitter": ("0.12", float),
    "scenario.elongated": ("false", _bool),
    "scenario.burn_start": ("2014-07-20", dt.date.fromisoformat),
    "scenario.pixel_size_m": ("5", float),
    "sampling.per_polygon": ("15", int),
    "sampling.min_dist_m": ("30", float),
    "sampling.max_half": ("6", int),
    "glcm.window": ("11", int),
    "glcm.levels": ("64", int),
    "glcm.offset": ("1", int),
    "ivm.sigma_grid": ("0.25,0.5,1,2,4,8,16", _floats),
    "ivm.c_grid": ("0.125,0.25,0.5,1,2,4,8,16,32,64,128", _floats),
    "ivm.folds": ("5", int),
    "ivm.max_import": ("100", int),
    "ivm.tol": ("0.001", float),
    "ivm.n_candidates": ("all", _opt_int),
    "mrf.delta": ("potts", str),
    "mrf.forward_matrix": ("default", str),
    "mrf.beta_sp": ("1.0", float),
    "mrf.beta_temp": ("1.0", float),
    "mrf.base_days": ("11", int),
    "mrf.prob_floor": ("1e-12", float),
    "lbp.max_iters": ("10", int),
    "lbp.damping": ("0", float),
    "lbp.convergence_eps": ("0.0001", float),
    "lbp.window": ("256", int),
    "lbp.keep_best": ("true", _bool),
    "pipeline.runs": ("10", int),
    "pipeline.seed": ("0", int),
    "pipeline.out": ("out", str),
}


@dataclass
class PipelineConfig:
    values: dict[str, Any]
    base_dir: Path = field(default_factory=Path.cwd)
    threads: int = 1

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def class_set(self) -> ClassSet:
        return ClassSet(self["classes.names"])

    @property
    def out(self) -> Path:
        return self.resolve(self["pipeline.out"])

    @property
    def seed(self) -> int:
        return self["pipeline.seed"]

    @property
    def runs(self) -> int:
        return self["pipeline.runs"]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def glcm(self) -> GlcmConfig:
        return GlcmConfig(self["glcm.window"], self["glcm.levels"], self["glcm.offset"])

    def lbp(self) -> LbpConfig:
        return LbpConfig(
            max_iters=self["lbp.max_iters"],
            damping=self["lbp.damping"],
            convergence_eps=self["lbp.convergence_eps"],
            window=self["lbp.window"],
            keep_best=self["lbp.keep_best"],
            threads=self.threads,
        )

    def min_dist_px(self) -> float:
        return self["sampling.min_dist_m"] / self["scenario.pixel_size_m"]


def parse_config(text: str, base_dir: Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        raw[key] = value
    raw.update(overrides or {})
    values = {}
    for key, (default, parse) in SCHEMA.items():
        text_value = raw.get(key, default)
        try:
            values[key] = parse(text_value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text_value!r} ({exc})") from None
    cfg = PipelineConfig(values, base_dir or Path.cwd())
    _validate(cfg)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent, overrides)


def _validate(cfg: PipelineConfig) -> None:
    v = cfg.values
    if v["mrf.beta_sp"] < 0 or v["mrf.beta_temp"] < 0:
        raise ConfigError("beta values must be >= 0")
    if v["pipeline.runs"] < 1:
        raise ConfigError("pipeline.runs must be >= 1")
    if not v["ivm.sigma_grid"] or not v["ivm.c_grid"]:
        raise ConfigError("IVM grids must be non-empty")
    if min(v["ivm.sigma_grid"]) <= 0 or min(v["ivm.c_grid"]) <= 0:
        raise ConfigError("IVM grid values must be > 0")
    if v["ivm.folds"] < 2:
        raise ConfigError("ivm.folds must be >= 2")
    for key in ("mrf.delta", "mrf.forward_matrix"):
        if v[key] not in ("potts", "default") and not cfg.resolve(v[key]).is_file():
            raise ConfigError(f"{key}: file {v[key]!r} does not exist")
    if v["mrf.delta"] == "default":
        raise ConfigError("mrf.delta must be 'potts' or a CSV path")
    if v["mrf.forward_matrix"] == "potts":
        raise ConfigError("mrf.forward_matrix must be 'default' or a CSV path")
    try:
        cfg.glcm()
        cfg.lbp()
        cfg.class_set
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if v["mrf.forward_matrix"] == "default" and tuple(v["classes.names"]) != DEFAULT_CLASSES:
        raise ConfigError("the default forward matrix needs the default class set; give mrf.forward_matrix")


def default_config_text() -> str:
    lines = []
    section = None
    for key, (default, _) in SCHEMA.items():
        sec = key.split(".")[0]
        if sec != section:
            if section is not None:
                lines.append("")
            section = sec
        lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"
