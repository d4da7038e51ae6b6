from __future__ import annotations

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from bifbm.covariance import BifbmParams
from bifbm.errors import ConfigError, ParameterDomainError, QuadratureSchemeError
from bifbm.heat import SpaceTimeGrid
from bifbm.samplers import QuadratureScheme, SamplerSettings

COMMANDS = ("simulate", "cov-check", "verify-decomposition", "variation", "heat", "step-norms", "full-suite")
PROCESSES = ("bifbm", "fbm", "xk", "heat")
FORMATS = ("csv", "json")
X_METHODS = ("quadrature", "cholesky")
SEED_LIMIT = 1 << 64


@dataclass(slots=True)
class RunConfig:
    command: str = ""
    process: str = "bifbm"
    H: float = 0.6
    K: float = 0.75
    T: float = 1.0
    n: int = 1024
    n_rep: int = 1
    master_seed: int = 0
    out_dir: Path = Path("out")
    format: str = "csv"
    workers: int = 1
    x_method: str = "quadrature"

    @property
    def params(self) -> BifbmParams:
        return BifbmParams(self.H, self.K)


@dataclass(slots=True)
class SamplerConfig:
    theta_min: float = 1e-6
    theta_max: float = 1e14
    quadrature_nodes: int = 4096
    quadrature_tolerance: float = 1e-3
    t_floor_fraction: float = 0.05
    circulant_floor: float = 1e-9
    jitter_ladder: list[float] = field(default_factory=lambda: [0.0, 1e-14, 1e-12, 1e-10])
    block_size: int = 64

    def scheme(self) -> QuadratureScheme:
        return QuadratureScheme(self.theta_min, self.theta_max, self.quadrature_nodes)

    def settings(self) -> SamplerSettings:
        return SamplerSettings(
            self.scheme(),
            self.quadrature_tolerance,
            tuple(self.jitter_ladder),
            self.circulant_floor,
            self.t_floor_fraction,
        )


@dataclass(slots=True)
class HeatConfig:
    time_cells: int = 512
    space_cells: int = 256
    window_sigmas: float = 8.0
    x0: float = 0.0

    def space_time_grid(self, horizon: float) -> SpaceTimeGrid:
        return SpaceTimeGrid(horizon, self.time_cells, self.space_cells, self.window_sigmas * math.sqrt(horizon))


@dataclass(slots=True)
class SuiteConfig:
    law_n_rep: int = 10000
    law_grid_points: int = 64
    quadrature_n_rep: int = 10000
    fubini_drivers: int = 100
    variation_steps: int = 16384
    variation_paths: int = 100
    x_variation_paths: int = 20
    heat_n_rep: int = 10000
    heat_grid_points: int = 16
    heat_horizon: float = 2.0
    origin_n_rep: int = 1000
    holder_paths: int = 50
    holder_points: int = 16384
    continuity_paths: int = 20
    step_functions: int = 200


@dataclass(slots=True)
class LoggingConfig:
    log_file: Path | None = None
    max_lines: int = 1000
    level: str = "INFO"


@dataclass(slots=True)
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    heat: HeatConfig = field(default_factory=HeatConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    explicit: set[str] = field(default_factory=set)

    @classmethod
    def load(cls, path: Path | None) -> "Config":
        if path is None or not path.exists():
            raw: dict[str, Any] = {}
        elif path.suffix == ".toml":
            try:
                with path.open("rb") as fh:
                    raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        else:
            raw = parse_key_values(path.read_text(encoding="utf-8"), source=str(path))
        config = cls.from_dict(raw)
        config.apply_env_fallbacks()
        config.normalize()
        return config

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Config":
        run = raw.get("run", {})
        sampler = raw.get("sampler", {})
        heat = raw.get("heat", {})
        suite = raw.get("suite", {})
        logging = raw.get("logging", {})
        defaults = SuiteConfig()

        log_file = logging.get("log_file")
        return cls(
            run=RunConfig(
                command=str(run.get("command", "")),
                process=str(run.get("process", "bifbm")),
                H=_float(run.get("H"), 0.6, "run.H"),
                K=_float(run.get("K"), 0.75, "run.K"),
                T=_float(run.get("T"), 1.0, "run.T"),
                n=_int(run.get("n"), 1024, "run.n"),
                n_rep=_int(run.get("n_rep"), 1, "run.n_rep"),
                master_seed=_int(run.get("master_seed", run.get("seed")), 0, "run.master_seed"),
                out_dir=Path(str(run.get("out_dir", "out"))),
                format=str(run.get("format", "csv")).lower(),
                workers=_int(run.get("workers"), 1, "run.workers"),
                x_method=str(run.get("x_method", "quadrature")),
            ),
            sampler=SamplerConfig(
                theta_min=_float(sampler.get("theta_min"), 1e-6, "sampler.theta_min"),
                theta_max=_float(sampler.get("theta_max"), 1e14, "sampler.theta_max"),
                quadrature_nodes=_int(sampler.get("quadrature_nodes"), 4096, "sampler.quadrature_nodes"),
                quadrature_tolerance=_float(sampler.get("quadrature_tolerance"), 1e-3, "sampler.quadrature_tolerance"),
                t_floor_fraction=_float(sampler.get("t_floor_fraction"), 0.05, "sampler.t_floor_fraction"),
                circulant_floor=_float(sampler.get("circulant_floor"), 1e-9, "sampler.circulant_floor"),
                jitter_ladder=_float_list(sampler.get("jitter_ladder"), [0.0, 1e-14, 1e-12, 1e-10], "sampler.jitter_ladder"),
                block_size=_int(sampler.get("block_size"), 64, "sampler.block_size"),
            ),
            heat=HeatConfig(
                time_cells=_int(heat.get("time_cells"), 512, "heat.time_cells"),
                space_cells=_int(heat.get("space_cells"), 256, "heat.space_cells"),
                window_sigmas=_float(heat.get("window_sigmas"), 8.0, "heat.window_sigmas"),
                x0=_float(heat.get("x0"), 0.0, "heat.x0"),
            ),
            suite=SuiteConfig(
                **{
                    name: (_float if isinstance(getattr(defaults, name), float) else _int)(
                        suite.get(name), getattr(defaults, name), f"suite.{name}"
                    )
                    for name in SuiteConfig.__dataclass_fields__
                }
            ),
            logging=LoggingConfig(
                log_file=Path(str(log_file)) if log_file else None,
                max_lines=_int(logging.get("max_lines"), 1000, "logging.max_lines"),
                level=str(logging.get("level", "INFO")).upper(),
            ),
            explicit={f"{section}.{key}" for section, values in raw.items() if isinstance(values, Mapping) for key in values},
        )

    def apply_env_fallbacks(self) -> None:
        if "run.out_dir" not in self.explicit:
            value = _env("BIFBM_OUT_DIR")
            if value:
                self.run.out_dir = Path(value)
        if "run.workers" not in self.explicit:
            self.run.workers = _int(_env("BIFBM_WORKERS"), self.run.workers, "BIFBM_WORKERS")
        if self.logging.log_file is None:
            value = _env("BIFBM_LOG_FILE")
            if value:
                self.logging.log_file = Path(value)

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in RunConfig.__dataclass_fields__:
                raise ConfigError(f"unknown run option {name!r}")
            setattr(self.run, name, Path(value) if name == "out_dir" else value)
            self.explicit.add(f"run.{name}")

    def normalize(self) -> None:
        self.run.format = self.run.format.lower()
        if "run.workers" not in self.explicit:
            self.run.workers = max(1, self.run.workers)
        self.sampler.quadrature_nodes = max(2, self.sampler.quadrature_nodes)
        self.sampler.block_size = max(1, self.sampler.block_size)
        self.heat.time_cells = max(1, self.heat.time_cells)
        self.heat.space_cells = max(1, self.heat.space_cells)
        self.logging.max_lines = max(1, self.logging.max_lines)

    def validate(self) -> None:
        run = self.run
        try:
            run.params
            self.sampler.scheme()
        except (ParameterDomainError, QuadratureSchemeError) as exc:
            raise ConfigError(str(exc)) from exc
        if run.command and run.command not in COMMANDS:
            raise ConfigError(f"unknown command {run.command!r}")
        if run.process not in PROCESSES:
            raise ConfigError(f"process must be one of {', '.join(PROCESSES)}, got {run.process!r}")
        if run.format not in FORMATS:
            raise ConfigError(f"format must be csv or json, got {run.format!r}")
        if run.x_method not in X_METHODS:
            raise ConfigError(f"x_method must be quadrature or cholesky, got {run.x_method!r}")
        if not run.T > 0.0:
            raise ConfigError(f"horizon T must be positive, got {run.T}")
        if not 0 <= run.master_seed < SEED_LIMIT:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {run.master_seed}")
        if run.n < 2:
            raise ConfigError(f"n must be at least 2 grid steps, got {run.n}")
        if run.n_rep < 1:
            raise ConfigError(f"n_rep must be at least 1, got {run.n_rep}")
        if run.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {run.workers}")
        if self.heat.window_sigmas <= 0.0:
            raise ConfigError("heat.window_sigmas must be positive")
        sampler = self.sampler
        if not 0.0 < sampler.t_floor_fraction <= 1.0:
            raise ConfigError(f"sampler.t_floor_fraction must be in (0, 1], got {sampler.t_floor_fraction}")
        if sampler.quadrature_tolerance <= 0.0:
            raise ConfigError("sampler.quadrature_tolerance must be positive")
        if not sampler.jitter_ladder or min(sampler.jitter_ladder) < 0.0:
            raise ConfigError("sampler.jitter_ladder must be a nonempty list of nonnegative jitters")
        for name in SuiteConfig.__dataclass_fields__:
            if getattr(self.suite, name) <= 0:
                raise ConfigError(f"suite.{name} must be positive, got {getattr(self.suite, name)}")


def parse_key_values(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key=value`` lines with ``#`` comments; ``section.key`` addresses a section, bare keys [run]."""
    raw: dict[str, dict[str, Any]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if not name:
            raise ConfigError(f"{source}:{number}: empty key")
        raw.setdefault(section or "run", {})[name] = value.strip().strip('"').strip("'")
    return raw


def _int(value: Any, default: int, name: str) -> int:
    if value is None or value == "":
        return default
    try:
        number = float(value) if isinstance(value, str) and any(c in value for c in ".eE") else value
        if isinstance(number, float) and not number.is_integer():
            raise ValueError
        return int(number)
    except (TypeError, ValueError, OverflowError) as exc:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from exc


def _float(value: Any, default: float, name: str) -> float:
    if value is None or value == "":
        return default
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number, got {value!r}") from exc


def _float_list(value: Any, default: list[float], name: str) -> list[float]:
    if value is None or value == "":
        return list(default)
    items = value.split(",") if isinstance(value, str) else value
    return [_float(item, 0.0, name) for item in items]


def _env(name: str) -> str | None:
    value = os.getenv(name)
    if value and value.strip():
        return value.strip()
    return None
