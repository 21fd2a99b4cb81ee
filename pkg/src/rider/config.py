from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal, cast

import yaml  # type: ignore[import-untyped]
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

LossName = Literal["squared", "logistic"]
MetricName = Literal["mse", "accuracy", "logloss"]
MethodName = Literal[
    "rider_nonparametric", "rider_parametric", "pooling", "recent_only", "exponential"
]


class InnovationConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    variance: float = Field(1.0, ge=0.0)
    # Gamma shape; None picks the largest shape that keeps the constant term c >= 0
    shape: float | None = Field(None, gt=0.0)


class ProcessConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    phi: list[float] = Field(default_factory=lambda: [0.5])
    alpha: list[float] = Field(default_factory=list)
    innovation: InnovationConfig = Field(default_factory=lambda: InnovationConfig())


class ParentConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    kind: Literal["uniform", "gaussian", "linear"] = "linear"
    d: int = Field(2, ge=1)
    theta0: list[float] | None = None
    noise_sd: float = Field(1.0, ge=0.0)
    shift_loading: float = Field(0.6, ge=0.0, le=1.0)
    outcome_loading: float = 1.0

    @model_validator(mode="after")
    def _theta_dim(self) -> ParentConfig:
        if self.theta0 is not None and len(self.theta0) != self.d:
            raise ValueError(f"theta0 has {len(self.theta0)} entries, expected d={self.d}")
        return self


class SimulateConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    T: int = Field(200, ge=1)
    m: int = Field(50, ge=1)
    n: int = Field(200, ge=1)
    # optional per-period sample sizes; overrides n when given
    sample_sizes: list[int] | None = None
    parent: ParentConfig = Field(default_factory=lambda: ParentConfig())
    process: ProcessConfig = Field(default_factory=lambda: ProcessConfig())

    @model_validator(mode="after")
    def _sizes(self) -> SimulateConfig:
        if self.sample_sizes is not None:
            if len(self.sample_sizes) != self.T:
                raise ValueError(f"sample_sizes has {len(self.sample_sizes)} entries, T={self.T}")
            if min(self.sample_sizes) < 1:
                raise ValueError("sample sizes must be positive")
        return self

    def resolved_sample_sizes(self) -> list[int]:
        return list(self.sample_sizes) if self.sample_sizes is not None else [self.n] * self.T


class ConstraintSet(BaseModel):
    """Extra constraints on top of the simplex: a cap on beta_1 and monotone ordering."""

    model_config = {
        "extra": "forbid",
        "frozen": True,
    }
    monotone: bool = False
    cap: float | None = Field(None, ge=0.0, le=1.0)
    # derive the cap as max_k of exponential reference weights with this half-life
    cap_half_life: float | None = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _one_cap(self) -> ConstraintSet:
        if self.cap is not None and self.cap_half_life is not None:
            raise ValueError("set either cap or cap_half_life, not both")
        return self


class TestFunctionConfig(BaseModel):
    __test__ = False  # not a pytest class

    model_config = {
        "extra": "forbid",
    }
    kind: Literal["covariate", "outcome", "indicator", "conditional"] = "covariate"
    index: int | None = Field(None, ge=0)
    low: float | None = None
    high: float | None = None
    # conditional kind: event is low <= x[event_index] < high
    event_index: int | None = Field(None, ge=0)
    numerator: Literal["outcome", "feature", "ratio"] = "outcome"
    numerator_index: int | None = Field(None, ge=0)
    min_count: int = Field(10, ge=1)
    label: str | None = None

    @model_validator(mode="after")
    def _required(self) -> TestFunctionConfig:
        if self.kind in {"covariate", "indicator"} and self.index is None:
            raise ValueError(f"{self.kind} test function needs an index")
        if self.kind == "indicator" and (self.low is None or self.high is None):
            raise ValueError("indicator test function needs low and high")
        if self.kind == "conditional":
            if self.event_index is None:
                raise ValueError("conditional test function needs event_index")
            if self.numerator in {"feature", "ratio"} and self.numerator_index is None:
                raise ValueError(f"numerator '{self.numerator}' needs numerator_index")
        return self


class EstimationConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    K: int = Field(10, ge=1)
    constraints: ConstraintSet = Field(default_factory=lambda: ConstraintSet())
    # "all": targets K+1..T; "half_window": the last K/2 targets only
    fit_window: Literal["all", "half_window"] = "all"
    standardize: bool = True
    whiten: bool = False
    # applied to features and outcomes before moments are taken
    clip_percentiles: tuple[float, float] | None = None
    # floor on samples per conditional cell and per quantile bin
    min_count: int = Field(10, ge=1)
    # quantile bins per variable when no test functions are configured
    bins: int = Field(30, ge=2)

    @field_validator("clip_percentiles")
    @classmethod
    def _pct(cls, v: tuple[float, float] | None) -> tuple[float, float] | None:
        if v is not None and not (0.0 <= v[0] < v[1] <= 100.0):
            raise ValueError("clip percentiles must satisfy 0 <= low < high <= 100")
        return v


class WermProblem(BaseModel):
    model_config = {
        "extra": "forbid",
        "frozen": True,
    }
    loss: LossName = "squared"
    regularization: float = Field(0.0, ge=0.0)
    intercept: bool = True
    # dataset_mean: sample weight beta_k / n_k; per_sample: beta_k
    weighting: Literal["dataset_mean", "per_sample"] = "dataset_mean"


class ParametricGrid(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    K: list[int] = Field(default_factory=lambda: [10, 20])
    alpha1: list[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    alpha2: list[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    # decay theta = (1/2)^(1/h)
    half_lives: list[float] = Field(default_factory=lambda: [2.0, 4.0, 6.0, 8.0])

    @field_validator("K", "alpha1", "alpha2", "half_lives")
    @classmethod
    def _nonempty(cls, v: list[Any]) -> list[Any]:
        if not v:
            raise ValueError("grid axes must be nonempty")
        return v


class CvScheme(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    holdout_fraction: float = Field(0.25, gt=0.0, le=1.0)
    metric: MetricName = "mse"
    n_jobs: int = 1


class MethodSpec(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    name: MethodName = "rider_nonparametric"
    recent_window: int = Field(1, ge=1)
    half_life: float = Field(9.0, gt=0.0)

    @property
    def label(self) -> str:
        if self.name == "recent_only":
            return f"recent_only[{self.recent_window}]"
        if self.name == "exponential":
            return f"exponential[H={self.half_life:g}]"
        return self.name


class BacktestConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    K: int = Field(10, ge=1)
    method: MethodSpec = Field(default_factory=lambda: MethodSpec())
    baselines: list[MethodSpec] = Field(default_factory=list)
    target_start: int | None = None
    target_end: int | None = None
    refit_every: int = Field(1, ge=1)
    metric: MetricName = "mse"
    clip_percentiles: tuple[float, float] | None = None
    estimation: EstimationConfig = Field(default_factory=lambda: EstimationConfig())
    test_functions: list[TestFunctionConfig] = Field(default_factory=list)
    grid: ParametricGrid = Field(default_factory=lambda: ParametricGrid())
    cv: CvScheme = Field(default_factory=lambda: CvScheme())
    problem: WermProblem = Field(default_factory=lambda: WermProblem())
    n_jobs: int = 1
    max_failure_fraction: float = Field(0.1, ge=0.0, le=1.0)

    @field_validator("clip_percentiles")
    @classmethod
    def _pct(cls, v: tuple[float, float] | None) -> tuple[float, float] | None:
        if v is not None and not (0.0 <= v[0] < v[1] <= 100.0):
            raise ValueError("clip percentiles must satisfy 0 <= low < high <= 100")
        return v


class PanelSchema(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    path: str | None = None
    time_column: str = "t"
    outcome_column: str = "y"
    # None: every column other than time/outcome, in file order
    feature_columns: list[str] | None = None
    grouping: Literal["time_index", "calendar_week"] = "time_index"

    @field_validator("path")
    @classmethod
    def _exists(cls, v: str | None) -> str | None:
        if v is not None and not Path(v).exists():
            raise ValueError(f"panel file not found: {v}")
        return v


class VerifyConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    clt_m: int = Field(2000, ge=10)
    clt_reps: int = Field(10_000, ge=100)
    clt_tolerance: float = Field(0.05, gt=0.0)
    consistency_reps: int = Field(30, ge=2)
    recovery_seeds: int = Field(10, ge=1)


class RunConfig(BaseModel):
    model_config = {
        "extra": "forbid",
    }
    seed: int = 0
    output_dir: str = "rider-out"
    simulate: SimulateConfig = Field(default_factory=lambda: SimulateConfig())
    panel: PanelSchema = Field(default_factory=lambda: PanelSchema())
    test_functions: list[TestFunctionConfig] = Field(default_factory=list)
    estimation: EstimationConfig = Field(default_factory=lambda: EstimationConfig())
    problem: WermProblem = Field(default_factory=lambda: WermProblem())
    grid: ParametricGrid = Field(default_factory=lambda: ParametricGrid())
    cv: CvScheme = Field(default_factory=lambda: CvScheme())
    backtest: BacktestConfig = Field(default_factory=lambda: BacktestConfig())
    verify: VerifyConfig = Field(default_factory=lambda: VerifyConfig())


def volatility_preset(K: int = 52, half_life: float = 9.0) -> BacktestConfig:
    """Weekly realized-volatility setup: clipped data, quantile-bin moments, capped monotone fit."""
    return BacktestConfig(
        K=K,
        method=MethodSpec(name="rider_nonparametric"),
        baselines=[
            MethodSpec(name="pooling"),
            MethodSpec(name="recent_only", recent_window=10),
            MethodSpec(name="exponential", half_life=half_life),
        ],
        clip_percentiles=(5.0, 95.0),
        estimation=EstimationConfig(
            K=K,
            constraints=ConstraintSet(monotone=True, cap_half_life=half_life),
            fit_window="half_window",
            standardize=True,
        ),
        problem=WermProblem(loss="squared", intercept=True, weighting="per_sample"),
    )


def _deep_update(dst: dict[str, Any], src: dict[str, Any]) -> dict[str, Any]:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            dst[k] = _deep_update(dst.get(k, {}), v)
        else:
            dst[k] = v
    return dst


def _coerce(raw: str) -> Any:
    low = raw.strip().lower()
    if low in {"true", "yes", "on"}:
        return True
    if low in {"false", "no", "off"}:
        return False
    try:
        if "." in raw or "e" in low:
            return float(raw)
        return int(raw)
    except ValueError:
        return raw


def _parse_env_overrides(prefix: str = "RIDER_") -> dict[str, Any]:
    """Parse environment variables into a nested dict using double underscore as a separator.

    Example:
      RIDER_ESTIMATION__K=8 -> {"estimation": {"K": 8}}
      RIDER_SEED=7          -> {"seed": 7}
    """
    out: dict[str, Any] = {}
    plen = len(prefix)
    fields = set(RunConfig.model_fields)
    for key, raw in os.environ.items():
        if not key.startswith(prefix):
            continue
        path = key[plen:]
        if path == "SEED":
            out["seed"] = int(raw)
            continue
        if "__" not in path:
            continue
        parts = [p.strip() for p in path.split("__") if p.strip()]
        if not parts or parts[0].lower() not in fields:
            continue
        # section names are lower case; leaf keys keep their case when it is a known
        # upper-case field (K, T), otherwise lower
        keys = [parts[0].lower()] + [p if p in {"K", "T"} else p.lower() for p in parts[1:]]
        node = out
        for p in keys[:-1]:
            node = node.setdefault(p, {})
        node[keys[-1]] = _coerce(raw)
    return out


def load_config_from_file(path: str | Path | None, env_prefix: str = "RIDER_") -> RunConfig:
    """Load config from YAML file and apply environment overrides.

    Raises ValidationError on invalid configuration.
    """
    data: dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"Config file not found: {p}")
        with p.open("r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise ValueError("Top-level YAML must be a mapping/object")
            data = loaded
    overrides = _parse_env_overrides(prefix=env_prefix)
    if overrides:
        data = _deep_update(data, overrides)
    return cast(RunConfig, RunConfig.model_validate(data))


def format_validation_error(e: ValidationError) -> list[str]:
    msgs: list[str] = []
    for err in e.errors(include_url=False):
        loc = ".".join(str(p) for p in err.get("loc", []))
        msg = err.get("msg", "Invalid value")
        msgs.append(f"{loc}: {msg}")
    return msgs


def validate_config_file(
    path: str | Path, env_prefix: str = "RIDER_"
) -> tuple[RunConfig | None, list[str]]:
    """Validate a config file and return (config, errors)."""
    try:
        cfg = load_config_from_file(path, env_prefix=env_prefix)
        return cfg, []
    except FileNotFoundError as e:
        return None, [str(e)]
    except ValidationError as e:
        return None, format_validation_error(e)
    except (ValueError, yaml.YAMLError) as e:
        return None, [f"Error: {e}"]
