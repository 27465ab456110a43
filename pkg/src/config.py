"""
Experiment configuration.

A config is a JSON document validated by ExperimentConfig. The output
directory may be overridden through HYPTIMES_OUTPUT_DIR, read from the
environment or from a .env file in the working directory.
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.dynamics import MAPS
from src.hyptimes import DEFAULT_THETAS, HyperbolicParams
from src.orbits import EnsembleSpec

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "HYPTIMES_OUTPUT_DIR"
LOG_LEVEL_ENV = "HYPTIMES_LOG_LEVEL"

EXPERIMENTS = ("detect", "firsttime", "ulam", "verify", "report")


class ConfigError(ValueError):
    """The config file could not be read or failed validation."""


class EnsembleSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["grid", "random"] = "grid"
    size: int = Field(10_000, ge=1)
    seed: int = Field(0, ge=0)

    def spec(self, size: Optional[int] = None) -> EnsembleSpec:
        return EnsembleSpec(kind=self.kind, size=self.size if size is None else size, seed=self.seed)


class DetectSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ensemble_size: int = Field(1_000, ge=1)
    horizons: List[int] = Field(default_factory=lambda: [1_000, 10_000, 100_000])
    thetas: List[float] = Field(default_factory=lambda: list(DEFAULT_THETAS))
    min_fraction: float = Field(0.95, ge=0.0, le=1.0)

    @field_validator("horizons")
    @classmethod
    def _positive_horizons(cls, value: List[int]) -> List[int]:
        if not value or min(value) < 1:
            raise ValueError("horizons must be a non-empty list of positive integers")
        return sorted(set(value))


class FirstTimeSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resamples: int = Field(200, ge=10)
    min_window_points: int = Field(200, ge=2)
    min_growth: float = Field(0.10, ge=0.0)
    near_one_offsets: List[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4])


class UlamSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tol: float = Field(1e-10, gt=0.0)
    max_iters: int = Field(100_000, ge=1)
    uniform_residual_tol: float = Field(1e-10, gt=0.0)
    sup_deviation_tol: float = Field(0.02, gt=0.0)
    refinement: List[int] = Field(default_factory=lambda: [256, 512, 1024, 2048])
    sampled_per_cell: int = Field(0, ge=0)
    pushforward_times: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    pushforward_size: int = Field(100_000, ge=1)
    pushforward_resolution: int = Field(128, ge=2)
    max_spread: float = Field(2.0, ge=1.0)

    @field_validator("pushforward_times")
    @classmethod
    def _increasing_times(cls, value: List[int]) -> List[int]:
        if len(value) < 2 or value[0] < 1 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("pushforward_times needs at least two strictly increasing positive times")
        return value


class VerifySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    detector_traces: int = Field(1_000, ge=1)
    detector_length: int = Field(200, ge=1)
    lyapunov_tol: float = Field(1e-6, gt=0.0)
    lyapunov_ensemble_size: int = Field(10_000, ge=1)
    lyapunov_horizon: int = Field(100_000, ge=1)
    lyapunov_ensemble_tol: float = Field(0.02, gt=0.0)
    moment_powers: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    moment_tol: float = Field(1e-6, gt=0.0)
    lemma51_N: int = Field(1_000_000, ge=10)
    lemma51_grid: int = Field(100, ge=1)
    transfer_points: int = Field(10_000, ge=1)
    transfer_tol: float = Field(1e-12, gt=0.0)
    pullback_scales: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    pullback_times: int = Field(100, ge=1)
    pullback_pairs: int = Field(10, ge=1)
    distortion_bound: float = Field(2.0, gt=1.0)
    birkhoff_size: int = Field(1_000, ge=1)
    birkhoff_horizon: int = Field(2_000, ge=1)
    slow_recurrence_size: int = Field(1_000, ge=1)
    slow_recurrence_horizon: int = Field(10_000, ge=1)
    slow_recurrence_deltas: List[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    expansion_threshold: float = -0.1

    @field_validator("slow_recurrence_deltas")
    @classmethod
    def _deltas_non_increasing(cls, value: List[float]) -> List[float]:
        if any(d <= 0.0 or d > 1.0 for d in value):
            raise ValueError("every delta_k must lie in (0, 1]")
        if any(b > a for a, b in zip(value, value[1:])):
            raise ValueError("delta_k must not increase with k")
        return value

    @field_validator("moment_powers")
    @classmethod
    def _powers_at_least_one(cls, value: List[float]) -> List[float]:
        if any(p < 1.0 for p in value):
            raise ValueError("moment powers must be at least 1")
        return value

    def slow_recurrence_schedule(self) -> List[Tuple[int, float]]:
        return [(k + 1, d) for k, d in enumerate(self.slow_recurrence_deltas)]


class ExperimentConfig(BaseModel):
    """Validated run configuration; every random draw flows from ensemble.seed."""
    model_config = ConfigDict(extra="forbid")

    map: str = "intermittent"
    sigma: float = Field(math.exp(-0.05), gt=0.0, lt=1.0)
    delta: float = Field(1e-4, gt=0.0, le=1.0)
    b: float = Field(0.25, gt=0.0)
    beta: float = Field(0.5, gt=0.0)
    tolerance: float = Field(0.0, ge=0.0)
    theta: float = Field(0.1, gt=0.0, le=1.0)
    ensemble: EnsembleSettings = Field(default_factory=EnsembleSettings)
    horizon: int = Field(100_000, ge=1)
    ulam_resolution: int = Field(4096, ge=2)
    output_dir: str = "results"
    experiments: List[str] = Field(default_factory=lambda: list(EXPERIMENTS))
    detect: DetectSettings = Field(default_factory=DetectSettings)
    firsttime: FirstTimeSettings = Field(default_factory=FirstTimeSettings)
    ulam: UlamSettings = Field(default_factory=UlamSettings)
    verify: VerifySettings = Field(default_factory=VerifySettings)

    @field_validator("map")
    @classmethod
    def _known_map(cls, value: str) -> str:
        if value not in MAPS:
            raise ValueError(f"unknown map '{value}', expected one of {sorted(MAPS)}")
        return value

    @field_validator("experiments")
    @classmethod
    def _known_experiments(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in EXPERIMENTS]
        if unknown:
            raise ValueError(f"unknown experiment(s) {unknown}, expected names from {list(EXPERIMENTS)}")
        return value

    @model_validator(mode="after")
    def _check_b_bound(self) -> "ExperimentConfig":
        bound = min(0.5, 1.0 / (4.0 * self.beta))
        if not self.b < bound:
            raise ValueError(f"b < min(1/2, 1/(4*beta)) violated: b = {self.b}, "
                             f"beta = {self.beta}, bound = {bound}")
        return self

    def params(self) -> HyperbolicParams:
        return HyperbolicParams(sigma=self.sigma, delta=self.delta, b=self.b,
                                beta=self.beta, tolerance=self.tolerance)


def load_config(path, env: bool = True) -> ExperimentConfig:
    """Read and validate a JSON config, applying the output-dir override."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    if env:
        load_dotenv()
        override = os.getenv(OUTPUT_DIR_ENV)
        if override:
            logger.info("output directory overridden by %s: %s", OUTPUT_DIR_ENV, override)
            raw["output_dir"] = override

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        messages = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
                             for err in exc.errors())
        raise ConfigError(f"{path}: {messages}") from exc
