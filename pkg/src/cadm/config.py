"""Run configuration stored as a sectioned ``key = value`` INI file."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticConfig
from .predictor import PredictorConfig, validate_scales
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, make_linear_schedule, scaled_linear_schedule
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSpec:
    T: int = 100
    # empty bounds select the rescaled linear schedule for T
    beta_start: float | None = None
    beta_end: float | None = None

    def build(self) -> NoiseSchedule:
        if self.beta_start is None and self.beta_end is None:
            return scaled_linear_schedule(self.T)
        if self.beta_start is None or self.beta_end is None:
            raise ConfigError("schedule: set both beta_start and beta_end or neither")
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class DataSpec:
    synthetic: bool = True
    root: str = ""
    name: str = "synthetic"
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    shapes_min: int = 2
    shapes_max: int = 5
    noise_level: float = 0.03
    seed: int = 0

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            size=self.image_size, n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            shapes_per_image=(self.shapes_min, self.shapes_max), noise_level=self.noise_level, seed=self.seed,
        )


@dataclass
class RunConfig:
    model: PredictorConfig = field(default_factory=PredictorConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataSpec = field(default_factory=DataSpec)
    out: str = "runs/default"

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = ("model", "schedule", "train", "sampler", "data")


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    kind = type(default)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if default is None:
            return float(raw) if raw else None
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def loads(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source} line {lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"{source} line {lineno}" if lineno else source
        raise ConfigError(f"{where}: {exc.message}") from None
    base = RunConfig()
    out = base.out
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS + ("run",):
            raise ConfigError(f"{source}: unknown section [{section}]")
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key != "out":
                raise ConfigError(f"{source}: unknown key run.{key}")
            out = raw.strip()
    for section in SECTIONS:
        current = getattr(base, section)
        names = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in names:
                    raise ConfigError(f"{source}: unknown key {section}.{key}")
                values[key] = _parse(raw, names[key], f"{source}: {section}.{key}")
        try:
            parts[section] = type(current)(**{**names, **values})
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from None
    return RunConfig(out=out, **parts)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    parser["run"] = {"out": cfg.out}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text(), source=str(path))


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def parse_scales(text: str) -> tuple:
    try:
        scales = tuple(sorted(int(s) for s in text.split(",") if s.strip()))
    except ValueError:
        raise ConfigError(f"--scales expects a comma separated list, got {text!r}") from None
    validate_scales(scales)
    return scales
