"""Rolling-window backtests: refit weights and model at each target, score one step ahead."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .config import BacktestConfig, EstimationConfig, MethodSpec
from .errors import BacktestAbortedError, InsufficientHistoryError, RiderError, RiderValidationError
from .estimator import (
    TestFunctionSpec,
    build_moments,
    clip_datasets,
    estimate_weights_nonparametric,
    estimate_weights_parametric_cv,
    specs_from_config,
)
from .logging_utils import log_event
from .rider_types import Panel, WeightVector
from .weights import closed_form_pooling, exponential_reference_weights
from .werm import evaluate, fit_weighted_erm

_RIDER_METHODS = {"rider_nonparametric", "rider_parametric"}


@dataclass(frozen=True, eq=False)
class TargetResult:
    t: int
    score: float
    beta: np.ndarray | None
    theta: np.ndarray | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(eq=False)
class MethodResult:
    label: str
    method: MethodSpec
    results: list[TargetResult]

    @property
    def targets(self) -> list[int]:
        return [r.t for r in self.results]

    @property
    def succeeded(self) -> list[TargetResult]:
        return [r for r in self.results if r.ok]

    @property
    def failures(self) -> int:
        return sum(1 for r in self.results if not r.ok)

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.results], dtype=float)

    @property
    def aggregate(self) -> float:
        ok = [r.score for r in self.results if r.ok]
        return float(np.mean(ok)) if ok else math.nan

    def trajectory(self) -> tuple[list[int], np.ndarray]:
        rows = [(r.t, r.beta) for r in self.results if r.ok and r.beta is not None]
        if not rows:
            return [], np.zeros((0, 0))
        return [t for t, _ in rows], np.vstack([b for _, b in rows])


@dataclass(frozen=True, eq=False)
class Comparison:
    method: str
    baseline: str
    targets: list[int]
    pct_diff: np.ndarray
    quantiles: dict[str, float]
    mean_pct_diff: float
    t_stat: float
    p_value: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "baseline": self.baseline,
            "n": len(self.targets),
            "mean_pct_diff": self.mean_pct_diff,
            "quantiles": self.quantiles,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
        }


@dataclass(eq=False)
class BacktestReport:
    config: BacktestConfig
    methods: dict[str, MethodResult]
    primary: str
    comparisons: list[Comparison] = field(default_factory=list)

    @property
    def targets(self) -> list[int]:
        return self.methods[self.primary].targets

    def scores(self, label: str | None = None) -> np.ndarray:
        return self.methods[label or self.primary].scores()

    def aggregate(self, label: str | None = None) -> float:
        return self.methods[label or self.primary].aggregate

    def trajectory(self, label: str | None = None) -> tuple[list[int], np.ndarray]:
        return self.methods[label or self.primary].trajectory()


def target_times(panel: Panel, config: BacktestConfig) -> list[int]:
    K = config.K
    labels = {config.method.name, *(b.name for b in config.baselines)}
    # rider methods estimate weights from the history, which needs at least K + 1 rows
    first = K + 1 if labels & _RIDER_METHODS else K
    if len(panel) <= first:
        raise InsufficientHistoryError(
            f"panel of length {len(panel)} is too short for K={K} (need more than {first})"
        )
    start = config.target_start if config.target_start is not None else panel[first].t
    end = config.target_end if config.target_end is not None else panel.times[-1]
    if end < start:
        raise RiderValidationError(f"empty target range {start}..{end}")
    for t in (start, end):
        if panel.index_of(t) < K:
            raise InsufficientHistoryError(f"target t={t} has fewer than K={K} prior datasets")
    return list(range(start, end + 1, config.refit_every))


def _weights_for(
    method: MethodSpec,
    panel: Panel,
    t: int,
    config: BacktestConfig,
    specs: Sequence[TestFunctionSpec],
) -> WeightVector:
    K = config.K
    window = panel.window(t, K)
    sizes = [ds.n for ds in reversed(window)]
    if method.name == "pooling":
        return closed_form_pooling(sizes)
    if method.name == "recent_only":
        w = min(method.recent_window, K)
        raw = np.zeros(K)
        raw[:w] = sizes[:w]
        return WeightVector.normalized(raw, method=method.label)
    if method.name == "exponential":
        return exponential_reference_weights(method.half_life, K)
    history = panel.before(t)
    if len(history) <= K:
        raise InsufficientHistoryError(
            f"t={t} has {len(history)} prior datasets; estimating K={K} weights needs more"
        )
    if method.name == "rider_nonparametric":
        est: EstimationConfig = config.estimation.model_copy(update={"K": K})
        if est.clip_percentiles is None:
            # estimate on the same clipped data the model is fitted on
            est = est.model_copy(update={"clip_percentiles": config.clip_percentiles})
        mm = build_moments(history, specs, est)
        return estimate_weights_nonparametric(mm, est)
    grid = config.grid.model_copy(update={"K": [K]})
    _, beta, _ = estimate_weights_parametric_cv(history, grid, config.problem, config.cv)
    return beta


def _run_target(
    method: MethodSpec,
    panel: Panel,
    t: int,
    config: BacktestConfig,
    specs: Sequence[TestFunctionSpec],
) -> TargetResult:
    try:
        beta = _weights_for(method, panel, t, config, specs)
        window = panel.window(t, config.K)
        test = panel[panel.index_of(t)]
        if config.clip_percentiles is not None:
            window, extra = clip_datasets(window, config.clip_percentiles, [test])
            test = extra[0]
        model = fit_weighted_erm(window, beta, config.problem, fitted_at=t)
        score = evaluate(model, test, config.metric)
        return TargetResult(t, score, beta.beta, model.theta)
    except RiderError as exc:
        log_event(
            event="backtest_target_failed",
            details={"method": method.label, "t": t, "error": str(exc)},
            level=logging.WARNING,
        )
        return TargetResult(t, math.nan, None, None, error=f"{type(exc).__name__}: {exc}")


def _run_method(
    method: MethodSpec,
    panel: Panel,
    targets: Sequence[int],
    config: BacktestConfig,
    specs: Sequence[TestFunctionSpec],
) -> MethodResult:
    results: list[TargetResult] = Parallel(n_jobs=config.n_jobs)(
        delayed(_run_target)(method, panel, t, config, specs) for t in targets
    )
    results.sort(key=lambda r: r.t)
    out = MethodResult(method.label, method, results)
    limit = config.max_failure_fraction * len(targets)
    if out.failures > limit:
        raise BacktestAbortedError(
            f"{method.label}: {out.failures} of {len(targets)} targets failed "
            f"(limit {config.max_failure_fraction:.0%})"
        )
    return out


def run_backtest(
    panel: Panel,
    config: BacktestConfig,
    specs: Sequence[TestFunctionSpec] | None = None,
) -> BacktestReport:
    """Score the configured method and every baseline on the same target times."""
    targets = target_times(panel, config)
    specs = list(specs) if specs is not None else specs_from_config(config.test_functions, panel.d)
    methods: dict[str, MethodResult] = {}
    for m in [config.method, *config.baselines]:
        if m.label in methods:
            raise RiderValidationError(f"method '{m.label}' listed twice")
        methods[m.label] = _run_method(m, panel, targets, config, specs)
    primary = config.method.label
    comparisons = [
        compare_scores(methods[primary], methods[b.label]) for b in config.baselines
    ]
    report = BacktestReport(config, methods, primary, comparisons)
    log_event(
        event="backtest_completed",
        details={
            "targets": len(targets),
            "aggregates": {k: v.aggregate for k, v in methods.items()},
            "failures": {k: v.failures for k, v in methods.items()},
        },
    )
    return report


def _paired_test(ours: np.ndarray, base: np.ndarray) -> tuple[float, float]:
    diff = ours - base
    if diff.shape[0] < 2:
        return math.nan, math.nan
    if np.all(diff == 0):
        return 0.0, 1.0
    res = stats.ttest_rel(ours, base)
    return float(res.statistic), float(res.pvalue)


def compare_scores(ours: MethodResult, base: MethodResult) -> Comparison:
    """Percentage differences 100 (ours - base) / base and a paired t-test.

    Negative differences favour `ours` for loss metrics. Targets where either side
    failed are left out.
    """
    if ours.targets != base.targets:
        raise RiderValidationError(
            f"'{ours.label}' and '{base.label}' were scored on different targets"
        )
    a, b = ours.scores(), base.scores()
    keep = np.isfinite(a) & np.isfinite(b)
    a, b = a[keep], b[keep]
    targets = [t for t, k in zip(ours.targets, keep, strict=True) if k]
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(b != 0, 100.0 * (a - b) / np.where(b != 0, b, 1.0), 0.0)
    if pct.shape[0]:
        q = np.percentile(pct, [0, 25, 50, 75, 100])
        quantiles = dict(zip(["min", "q1", "median", "q3", "max"], map(float, q), strict=True))
        mean_pct = float(pct.mean())
    else:
        quantiles = {k: math.nan for k in ["min", "q1", "median", "q3", "max"]}
        mean_pct = math.nan
    t_stat, p_value = _paired_test(a, b)
    return Comparison(ours.label, base.label, targets, pct, quantiles, mean_pct, t_stat, p_value)


def compare_methods(reports: Sequence[BacktestReport]) -> list[Comparison]:
    """Compare the primary method of the first report with the primary of each other report."""
    if len(reports) < 2:
        raise RiderValidationError("need at least two reports to compare")
    head = reports[0].methods[reports[0].primary]
    out = []
    for rep in reports[1:]:
        other = rep.methods[rep.primary]
        if other.targets != head.targets:
            raise RiderValidationError("reports do not share target ranges")
        if other.label == head.label:
            other = MethodResult(f"{other.label}#{len(out) + 1}", other.method, other.results)
        out.append(compare_scores(head, other))
    return out


@dataclass(frozen=True)
class LagQuantiles:
    k: int
    median: float
    q1: float
    q3: float
    iqr: float


def weight_trajectory_summary(
    report: BacktestReport, label: str | None = None
) -> list[LagQuantiles]:
    """Per-lag median and interquartile range of the fitted weights across targets."""
    _, traj = report.trajectory(label)
    if traj.size == 0:
        return []
    q1, med, q3 = np.percentile(traj, [25, 50, 75], axis=0)
    return [
        LagQuantiles(k + 1, float(med[k]), float(q1[k]), float(q3[k]), float(q3[k] - q1[k]))
        for k in range(traj.shape[1])
    ]
