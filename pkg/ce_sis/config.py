"""Configuration management for CE-SIS experiments"""

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional

from dotenv import load_dotenv

from .cic import KGrid
from .densities import INPUT_DENSITIES, GmmParams, InputDensity, get_input_density
from .errors import ConfigError, DensityError
from .models import MODEL_REGISTRY, SimulationModel, get_model
from .weighted_em import EmSettings

load_dotenv()

AUTO = "auto"


def _round_half_away(value: float) -> int:
    return int(math.floor(value + 0.5)) if value >= 0 else -int(math.floor(-value + 0.5))


@dataclass(frozen=True)
class RunConfig:
    """Everything a single CE-SIS run needs"""

    model_name: str = "numerical_example"
    density_name: str = "standard_normal"
    # None until resolved from calibration.target_p
    threshold: Optional[float] = None
    target_p: float = 0.00996

    # Budget schedule
    n0: int = 600
    nt: int = 100
    tau: int = 10
    m_ratio: float = 0.3

    k_grid: KGrid = field(default_factory=KGrid)
    em: EmSettings = field(default_factory=EmSettings)
    min_weighted: int = 5

    init_mu: tuple = (0.0,)
    init_sigma: tuple = (1.0,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_mu", tuple(float(v) for v in self.init_mu))
        object.__setattr__(self, "init_sigma", tuple(float(v) for v in self.init_sigma))

    @property
    def dimension(self) -> int:
        return len(self.init_mu)

    @property
    def schedule(self) -> List[int]:
        """n^(t) for t = 0..tau"""
        return [self.n0] + [self.nt] * self.tau

    @property
    def total_budget(self) -> int:
        return sum(self.schedule)

    def m_for(self, iteration: int) -> int:
        """Distinct inputs drawn at an iteration; all of n^(0) at t = 0"""
        if iteration == 0:
            return self.n0
        return max(1, _round_half_away(self.m_ratio * self.nt))

    def initial_theta(self) -> GmmParams:
        return GmmParams.single(self.init_mu, self.init_sigma)

    def build_model(self) -> SimulationModel:
        return get_model(self.model_name)

    def build_density(self) -> InputDensity:
        if self.density_name == "standard_normal":
            return get_input_density(self.density_name, dimension=self.dimension)
        return get_input_density(self.density_name)

    def with_threshold(self, threshold: Optional[float]) -> "RunConfig":
        return replace(self, threshold=None if threshold is None else float(threshold))

    def validate(self) -> List[str]:
        """Validate configuration and return list of errors"""
        errors = []

        if self.model_name not in MODEL_REGISTRY:
            errors.append(f"Unknown model.name '{self.model_name}'")
        if self.density_name not in INPUT_DENSITIES:
            errors.append(f"Unknown density.name '{self.density_name}'")
        if self.threshold is not None and not math.isfinite(self.threshold):
            errors.append("threshold.l must be finite")
        if not 0.0 < self.target_p < 1.0:
            errors.append("calibration.target_p must lie in (0, 1)")

        if self.n0 < 1 or self.nt < 1:
            errors.append("budget.n0 and budget.nt must be positive")
        if self.tau < 0:
            errors.append("budget.tau must not be negative")
        if not 0.0 < self.m_ratio <= 1.0:
            errors.append("budget.m_ratio must lie in (0, 1]")

        errors.extend(self.k_grid.validate())
        errors.extend(self.em.validate())
        if self.min_weighted < 1:
            errors.append("fallback.min_weighted must be at least 1")

        if len(self.init_mu) != len(self.init_sigma) or not self.init_mu:
            errors.append("init.mu and init.sigma must have the same non-zero length")
        elif any(v <= 0.0 for v in self.init_sigma):
            errors.append("init.sigma variances must be positive")
        else:
            try:
                self.initial_theta()
            except DensityError as e:
                errors.append(f"Invalid initial density: {e}")
        if self.seed < 0:
            errors.append("seed must not be negative")
        return errors


@dataclass(frozen=True)
class ExperimentSpec:
    """A RunConfig plus the repetition, baseline and output settings of an experiment"""

    run: RunConfig = field(default_factory=RunConfig)
    repetitions: int = 1
    out: str = "results"
    jobs: int = 1
    cmc: bool = False
    optimal_sis: bool = False
    optimal_n: int = 1000
    p_ref: Optional[float] = None

    # Logging
    log_level: str = "INFO"
    log_file: str = "ce_sis.log"

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ExperimentSpec":
        """Build a spec from dotted config keys; unknown keys are rejected"""
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

        def get(key: str, default):
            if key not in values:
                return default
            raw = values[key].strip()
            try:
                return CONFIG_KEYS[key](raw)
            except (TypeError, ValueError):
                raise ConfigError(f"Invalid value for {key}: {raw!r}") from None

        defaults = RunConfig()
        run = RunConfig(
            model_name=get("model.name", defaults.model_name),
            density_name=get("density.name", defaults.density_name),
            threshold=get("threshold.l", defaults.threshold),
            target_p=get("calibration.target_p", defaults.target_p),
            n0=get("budget.n0", defaults.n0),
            nt=get("budget.nt", defaults.nt),
            tau=get("budget.tau", defaults.tau),
            m_ratio=get("budget.m_ratio", defaults.m_ratio),
            k_grid=KGrid(
                k_min=get("k.min", defaults.k_grid.k_min),
                k_max_cap=get("k.max_cap", defaults.k_grid.k_max_cap),
            ),
            em=EmSettings(
                restarts=get("em.restarts", defaults.em.restarts),
                rel_tol=get("em.rel_tol", defaults.em.rel_tol),
                max_iters=get("em.max_iters", defaults.em.max_iters),
                cond_threshold=get("em.cond_threshold", defaults.em.cond_threshold),
            ),
            min_weighted=get("fallback.min_weighted", defaults.min_weighted),
            init_mu=get("init.mu", defaults.init_mu),
            init_sigma=get("init.sigma", defaults.init_sigma),
            seed=get("seed", defaults.seed),
        )
        return cls(
            run=run,
            repetitions=get("experiment.repetitions", cls.repetitions),
            out=get("experiment.out", cls.out),
            jobs=get("experiment.jobs", cls.jobs),
            cmc=get("experiment.cmc", cls.cmc),
            optimal_sis=get("experiment.optimal_sis", cls.optimal_sis),
            optimal_n=get("experiment.optimal_n", cls.optimal_n),
            p_ref=get("experiment.p_ref", cls.p_ref),
            log_level=get("logging.level", cls.log_level),
            log_file=get("logging.file", cls.log_file),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        """Create a spec from a config file, then apply environment overrides"""
        return cls.from_mapping(parse_config_file(path)).with_env()

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> "ExperimentSpec":
        """Apply LOG_LEVEL, LOG_FILE and CE_SIS_JOBS from the environment"""
        environ = os.environ if environ is None else environ
        jobs = self.jobs
        if environ.get("CE_SIS_JOBS"):
            try:
                jobs = int(environ["CE_SIS_JOBS"])
            except ValueError:
                raise ConfigError(f"Invalid CE_SIS_JOBS: {environ['CE_SIS_JOBS']!r}") from None
        return replace(
            self,
            jobs=jobs,
            log_level=environ.get("LOG_LEVEL") or self.log_level,
            log_file=environ.get("LOG_FILE", self.log_file),
        )

    def with_overrides(
        self,
        seed: Optional[int] = None,
        repetitions: Optional[int] = None,
        out: Optional[str] = None,
        jobs: Optional[int] = None,
    ) -> "ExperimentSpec":
        """Command-line flags win over both the file and the environment"""
        spec = self
        if seed is not None:
            spec = replace(spec, run=replace(spec.run, seed=seed))
        if repetitions is not None:
            spec = replace(spec, repetitions=repetitions)
        if out is not None:
            spec = replace(spec, out=out)
        if jobs is not None:
            spec = replace(spec, jobs=jobs)
        return spec

    def with_threshold(self, threshold: Optional[float]) -> "ExperimentSpec":
        return replace(self, run=self.run.with_threshold(threshold))

    def validate(self) -> List[str]:
        errors = self.run.validate()
        if self.repetitions < 1:
            errors.append("experiment.repetitions must be at least 1")
        if self.jobs < 1:
            errors.append("experiment.jobs must be at least 1")
        if self.optimal_n < 1:
            errors.append("experiment.optimal_n must be positive")
        if self.p_ref is not None and not 0.0 < self.p_ref < 1.0:
            errors.append("experiment.p_ref must lie in (0, 1)")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"Unknown logging.level '{self.log_level}'")
        return errors


def _bool(raw: str) -> bool:
    value = raw.lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _vector(raw: str) -> tuple:
    return tuple(float(item) for item in raw.split(",") if item.strip())


def _threshold(raw: str) -> Optional[float]:
    return None if raw.lower() == AUTO else float(raw)


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.lower() in ("", AUTO, "none") else float(raw)


CONFIG_KEYS: Dict[str, Callable[[str], object]] = {
    "model.name": str,
    "density.name": str,
    "threshold.l": _threshold,
    "calibration.target_p": float,
    "budget.n0": int,
    "budget.nt": int,
    "budget.tau": int,
    "budget.m_ratio": float,
    "k.min": int,
    "k.max_cap": int,
    "em.restarts": int,
    "em.rel_tol": float,
    "em.max_iters": int,
    "em.cond_threshold": float,
    "fallback.min_weighted": int,
    "init.mu": _vector,
    "init.sigma": _vector,
    "seed": int,
    "experiment.repetitions": int,
    "experiment.out": str,
    "experiment.jobs": int,
    "experiment.cmc": _bool,
    "experiment.optimal_sis": _bool,
    "experiment.optimal_n": int,
    "experiment.p_ref": _optional_float,
    "logging.level": str,
    "logging.file": str,
}


def parse_config_file(path) -> Dict[str, str]:
    """Read ``key=value`` lines; ``#`` starts a comment"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e

    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key {key}")
        values[key] = value
    return values


def update_config_value(path, key: str, value: str) -> None:
    """Rewrite (or append) one key in a config file, keeping everything else"""
    path = Path(path)
    if key not in CONFIG_KEYS:
        raise ConfigError(f"Unknown configuration key: {key}")
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        content = line.split("#", 1)[0]
        if "=" in content and content.split("=", 1)[0].strip() == key:
            lines[i] = f"{key}={value}"
            break
    else:
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
