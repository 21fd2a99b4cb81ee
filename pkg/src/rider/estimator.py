"""Estimating weights from data.

Test functions are summarized per dataset into a moment matrix; the nonparametric
estimator picks the simplex vector that best predicts each target row from its K
predecessors, and the parametric estimator scores a grid of mixture weights by
forward-chaining cross-validation of the weighted ERM fit.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from sklearn.model_selection import ParameterGrid

from .config import (
    CvScheme,
    EstimationConfig,
    MetricName,
    ParametricGrid,
    TestFunctionConfig,
    WermProblem,
)
from .errors import (
    DegenerateTestFunctionError,
    InsufficientHistoryError,
    RiderError,
    RiderValidationError,
    SingularSystemError,
)
from .logging_utils import log_event
from .qp import solve_simplex_qp
from .rider_types import Panel, TimedDataset, WeightVector
from .weights import (
    ParametricWeightConfig,
    exponential_reference_weights,
    parametric_weights,
    resolve_cap,
)
from .werm import evaluate, fit_weighted_erm

WHITEN_MAX_COND = 1e10
DEFAULT_MIN_COUNT = 10

SampleFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
TestKind = Literal["covariate", "outcome", "indicator", "conditional"]


@dataclass(frozen=True, eq=False)
class TestFunctionSpec:
    """A scalar summary phi(X, Y) whose per-dataset means are matched across time.

    covariate: X[:, index]; outcome: Y; indicator: 1[low <= X[:, index] < high];
    conditional: mean of g over samples in the event, which needs `min_count` samples
    per dataset. Values are mapped through scale * phi + offset.
    """

    __test__ = False  # not a pytest class

    kind: TestKind
    index: int | None = None
    low: float | None = None
    high: float | None = None
    event: SampleFn | None = None  # boolean mask per sample
    g: SampleFn | None = None
    min_count: int = DEFAULT_MIN_COUNT
    scale: float = 1.0
    offset: float = 0.0
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind in {"covariate", "indicator"} and self.index is None:
            raise RiderValidationError(f"{self.kind} test function needs an index")
        if self.kind == "indicator" and (self.low is None or self.high is None):
            raise RiderValidationError("indicator test function needs low and high")
        if self.kind == "conditional" and (self.event is None or self.g is None):
            raise RiderValidationError("conditional test function needs an event and g")
        if self.min_count < 1:
            raise RiderValidationError("min_count must be >= 1")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())

    def _default_label(self) -> str:
        if self.kind == "covariate":
            return f"x{(self.index or 0) + 1}"
        if self.kind == "outcome":
            return "y"
        if self.kind == "indicator":
            return f"1[{self.low:g}<=x{(self.index or 0) + 1}<{self.high:g}]"
        return "E[g|A]"

    def check_dim(self, d: int) -> None:
        if self.index is not None and not (0 <= self.index < d):
            raise RiderValidationError(
                f"test function '{self.label}' uses feature {self.index} but d={d}"
            )

    def values(self, features: np.ndarray, outcomes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample values and the mask of samples that enter the mean."""
        x = np.asarray(features, dtype=float)
        y = np.asarray(outcomes, dtype=float)
        mask = np.ones(y.shape[0], dtype=bool)
        if self.kind == "covariate":
            vals = x[:, self.index]
        elif self.kind == "outcome":
            vals = y
        elif self.kind == "indicator":
            col = x[:, self.index]
            vals = ((col >= self.low) & (col < self.high)).astype(float)
        else:
            assert self.event is not None and self.g is not None
            mask = np.asarray(self.event(x, y), dtype=bool).reshape(-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.asarray(self.g(x, y), dtype=float).reshape(-1)
            mask &= np.isfinite(vals)
            vals = np.where(mask, vals, 0.0)
        return self.scale * vals + self.offset, mask

    def affine(self, scale: float, offset: float = 0.0) -> TestFunctionSpec:
        return replace(self, scale=self.scale * scale, offset=self.offset * scale + offset)


def default_test_functions(d: int, include_outcome: bool = True) -> list[TestFunctionSpec]:
    specs = [TestFunctionSpec("covariate", index=i) for i in range(d)]
    if include_outcome:
        specs.append(TestFunctionSpec("outcome"))
    return specs


def spec_from_config(cfg: TestFunctionConfig) -> TestFunctionSpec:
    if cfg.kind != "conditional":
        return TestFunctionSpec(
            cfg.kind,
            index=cfg.index,
            low=cfg.low,
            high=cfg.high,
            min_count=cfg.min_count,
            label=cfg.label or "",
        )
    ev = cfg.event_index
    lo = -np.inf if cfg.low is None else cfg.low
    hi = np.inf if cfg.high is None else cfg.high

    def event(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x[:, ev] >= lo) & (x[:, ev] < hi)

    num = cfg.numerator_index

    def g(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if cfg.numerator == "outcome":
            return y
        if cfg.numerator == "feature":
            return x[:, num]
        return x[:, num] / y

    label = cfg.label or f"E[{cfg.numerator}|{lo:g}<=x{(ev or 0) + 1}<{hi:g}]"
    return TestFunctionSpec(
        "conditional", event=event, g=g, min_count=cfg.min_count, label=label
    )


def specs_from_config(configs: Sequence[TestFunctionConfig], d: int) -> list[TestFunctionSpec]:
    """Specs for the configured test functions; an empty list selects the quantile-bin family."""
    for c in configs:
        for name in ("event_index", "numerator_index"):
            idx = getattr(c, name)
            if idx is not None and idx >= d:
                raise RiderValidationError(f"{name}={idx} is out of range for d={d}")
    specs = [spec_from_config(c) for c in configs]
    for s in specs:
        s.check_dim(d)
    return specs


@dataclass(frozen=True, eq=False)
class MomentMatrix:
    values: np.ndarray  # (T, L); invalid cells hold 0
    valid: np.ndarray  # (T, L) bool
    cell_counts: np.ndarray  # (T, L) int
    times: np.ndarray  # (T,)
    labels: tuple[str, ...]
    meta: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape != np.shape(self.valid) or v.shape != np.shape(self.cell_counts):
            raise RiderValidationError("moment matrix arrays must share one (T, L) shape")
        if v.shape[1] != len(self.labels) or v.shape[0] != len(self.times):
            raise RiderValidationError("moment matrix labels/times do not match its shape")
        if not np.all(np.isfinite(v)):
            raise RiderValidationError("moment matrix contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return int(self.values.shape[0])

    @property
    def L(self) -> int:
        return int(self.values.shape[1])

    def with_values(
        self, values: np.ndarray, valid: np.ndarray | None = None, **meta: object
    ) -> MomentMatrix:
        return MomentMatrix(
            values=values,
            valid=self.valid if valid is None else valid,
            cell_counts=self.cell_counts,
            times=self.times,
            labels=self.labels,
            meta={**self.meta, **meta},
        )


def _required_count(spec: TestFunctionSpec, floor: int) -> int:
    return max(spec.min_count, floor) if spec.kind == "conditional" else 1


def evaluate_test_functions(
    panel: Panel, specs: Sequence[TestFunctionSpec], min_count: int = 1
) -> MomentMatrix:
    """Per-dataset means of each test function.

    A conditional cell is valid when its event holds for at least max(spec.min_count,
    min_count) samples; every other cell is valid.
    """
    if not specs:
        raise RiderValidationError("at least one test function is required")
    for s in specs:
        s.check_dim(panel.d)
    T, L = len(panel), len(specs)
    values = np.zeros((T, L))
    valid = np.zeros((T, L), dtype=bool)
    counts = np.zeros((T, L), dtype=int)
    for i, ds in enumerate(panel):
        for j, spec in enumerate(specs):
            vals, mask = spec.values(ds.features, ds.outcomes)
            cnt = int(mask.sum())
            counts[i, j] = cnt
            if cnt >= _required_count(spec, min_count):
                values[i, j] = float(vals[mask].mean())
                valid[i, j] = True
    for j, spec in enumerate(specs):
        if not valid[:, j].any():
            raise DegenerateTestFunctionError(
                f"test function '{spec.label}' has fewer than "
                f"{_required_count(spec, min_count)} samples in every dataset"
            )
    return MomentMatrix(values, valid, counts, np.array(panel.times), tuple(s.label for s in specs))


def pooled_samples(
    panel: Panel, spec: TestFunctionSpec, keep: Sequence[bool] | np.ndarray | None = None
) -> np.ndarray:
    """Per-sample values of one test function pooled over the datasets flagged in `keep`."""
    chunks = []
    for i, ds in enumerate(panel):
        if keep is not None and not keep[i]:
            continue
        vals, mask = spec.values(ds.features, ds.outcomes)
        chunks.append(vals[mask])
    return np.concatenate(chunks)


def standardize_moments(
    mm: MomentMatrix, panel: Panel, specs: Sequence[TestFunctionSpec]
) -> MomentMatrix:
    """Divide each column by the pooled sample standard deviation of its test function.

    Only datasets whose cell is valid contribute to the pooled sample.
    """
    if len(specs) != mm.L:
        raise RiderValidationError(f"{len(specs)} specs for a moment matrix with L={mm.L}")
    sds = np.empty(mm.L)
    for j, spec in enumerate(specs):
        pooled = pooled_samples(panel, spec, mm.valid[:, j])
        sd = float(np.std(pooled, ddof=1)) if pooled.shape[0] > 1 else 0.0
        if not sd > 0:
            raise DegenerateTestFunctionError(
                f"test function '{spec.label}' has zero pooled variance and cannot be standardized"
            )
        sds[j] = sd
    return mm.with_values(np.where(mm.valid, mm.values / sds, 0.0), standardized=True)


def inverse_sqrt(cov: np.ndarray) -> np.ndarray:
    """Inverse symmetric square root of a covariance matrix."""
    evals, evecs = linalg.eigh(np.atleast_2d(np.asarray(cov, dtype=float)))
    if evals[0] <= 0 or evals[-1] / evals[0] >= WHITEN_MAX_COND:
        raise SingularSystemError(
            "pooled covariance of the test functions is singular; drop redundant test functions"
        )
    return np.asarray((evecs / np.sqrt(evals)) @ evecs.T, dtype=float)


def whitening_matrix(samples: np.ndarray) -> np.ndarray:
    """Whitening map for the columns of a sample matrix."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[0] < 2:
        raise RiderValidationError("need a 2-D sample matrix with at least two rows")
    return inverse_sqrt(np.cov(s, rowvar=False, ddof=1))


def pooled_covariance(panel: Panel, specs: Sequence[TestFunctionSpec]) -> np.ndarray:
    """Covariance of (phi_1, ..., phi_L) over all samples, accumulated per dataset."""
    L = len(specs)
    total = np.zeros(L)
    cross = np.zeros((L, L))
    count = 0
    for ds in panel:
        s = np.column_stack([spec.values(ds.features, ds.outcomes)[0] for spec in specs])
        total += s.sum(axis=0)
        cross += s.T @ s
        count += s.shape[0]
    if count < 2:
        raise RiderValidationError("need at least two samples to estimate a covariance")
    mean = total / count
    return (cross - count * np.outer(mean, mean)) / (count - 1)


@dataclass(frozen=True, eq=False)
class Whitener:
    """Linear map M with M Cov(phi) M' = I, applied to samples or to moment rows."""

    matrix: np.ndarray
    labels: tuple[str, ...]

    def transform_samples(self, samples: np.ndarray) -> np.ndarray:
        return np.asarray(samples, dtype=float) @ self.matrix.T

    def transform(self, mm: MomentMatrix) -> MomentMatrix:
        if mm.L != self.matrix.shape[0]:
            raise RiderValidationError("whitener and moment matrix disagree on L")
        row_ok = mm.valid.all(axis=1)
        vals = np.where(row_ok[:, None], mm.values @ self.matrix.T, 0.0)
        valid = np.repeat(row_ok[:, None], mm.L, axis=1)
        return MomentMatrix(
            vals,
            valid,
            mm.cell_counts,
            mm.times,
            tuple(f"w{j + 1}" for j in range(mm.L)),
            {**mm.meta, "whitened": True},
        )


def whiten_test_functions(panel: Panel, specs: Sequence[TestFunctionSpec]) -> Whitener:
    if any(s.kind == "conditional" for s in specs):
        raise RiderValidationError("whitening applies to unconditional test functions only")
    return Whitener(inverse_sqrt(pooled_covariance(panel, specs)), tuple(s.label for s in specs))


@dataclass(frozen=True, eq=False)
class QuantileBins:
    """Indicators of pooled-quantile bins of every feature and of the outcome.

    Bin edges come from the panel the family is fitted on. Bins holding fewer than
    `min_count` pooled samples are dropped, and so is the last kept bin of each
    variable, so no combination of the indicators is constant.
    """

    cuts: tuple[np.ndarray, ...]  # per variable: interior edges, increasing
    kept: tuple[np.ndarray, ...]  # per variable: codes of the bins in the family
    labels: tuple[str, ...]

    @classmethod
    def fit(cls, panel: Panel, bins: int, min_count: int = DEFAULT_MIN_COUNT) -> QuantileBins:
        x, y = panel.pooled()
        cols = np.column_stack([x, y])
        names = [f"x{j + 1}" for j in range(panel.d)] + ["y"]
        q = min(bins, cols.shape[0] // min_count)
        probs = np.linspace(0.0, 1.0, q + 1)[1:-1] if q >= 2 else np.empty(0)
        cuts, kept, labels = [], [], []
        for name, col in zip(names, cols.T, strict=True):
            cut = np.unique(np.quantile(col, probs)) if probs.size else np.empty(0)
            codes = np.searchsorted(cut, col, side="right")
            counts = np.bincount(codes, minlength=cut.size + 1)
            keep = np.flatnonzero(counts >= min_count)[:-1]
            bounds = np.concatenate([[-np.inf], cut, [np.inf]])
            labels += [f"1[{bounds[c]:g}<={name}<{bounds[c + 1]:g}]" for c in keep]
            cuts.append(cut)
            kept.append(keep)
        if not labels:
            raise DegenerateTestFunctionError(
                f"no quantile bin holds {min_count} samples in a panel of {cols.shape[0]}"
            )
        return cls(tuple(cuts), tuple(kept), tuple(labels))

    @property
    def L(self) -> int:
        return len(self.labels)

    def indicators(self, features: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        """(n, L) matrix of bin memberships."""
        cols = np.column_stack([np.asarray(features, dtype=float), np.asarray(outcomes, float)])
        blocks = [
            np.searchsorted(cut, col, side="right")[:, None] == keep[None, :]
            for cut, keep, col in zip(self.cuts, self.kept, cols.T, strict=True)
        ]
        return np.hstack(blocks).astype(float)


def quantile_bin_moments(
    panel: Panel, bins: int, min_count: int = DEFAULT_MIN_COUNT
) -> MomentMatrix:
    """Whitened moments of the quantile-bin family fitted on `panel` itself."""
    family = QuantileBins.fit(panel, bins, min_count)
    samples = [family.indicators(ds.features, ds.outcomes) for ds in panel]
    values = np.vstack([s.mean(axis=0) for s in samples])
    counts = np.repeat(panel.sample_sizes[:, None], family.L, axis=1)
    mm = MomentMatrix(
        values,
        np.ones(values.shape, dtype=bool),
        counts,
        np.array(panel.times),
        family.labels,
        {"family": "quantile_bins"},
    )
    whitener = Whitener(whitening_matrix(np.vstack(samples)), family.labels)
    return whitener.transform(mm)


def build_moments(
    panel: Panel, specs: Sequence[TestFunctionSpec], config: EstimationConfig
) -> MomentMatrix:
    """Moment matrix the nonparametric estimator fits.

    Features and outcomes are first clipped at `config.clip_percentiles` of the panel.
    With no specs the whitened quantile-bin family of the panel is used.
    """
    if config.clip_percentiles is not None:
        panel = Panel(clip_datasets(list(panel), config.clip_percentiles)[0])
    if not specs:
        return quantile_bin_moments(panel, config.bins, config.min_count)
    mm = evaluate_test_functions(panel, specs, config.min_count)
    if config.whiten:
        return whiten_test_functions(panel, specs).transform(mm)
    if config.standardize:
        return standardize_moments(mm, panel, specs)
    return mm


def _target_rows(
    mm: MomentMatrix, config: EstimationConfig, targets: Sequence[int] | None
) -> list[int]:
    K = config.K
    if K >= mm.T:
        raise InsufficientHistoryError(f"K={K} needs more than {K} datasets, got T={mm.T}")
    if targets is not None:
        time_to_row = {int(t): i for i, t in enumerate(mm.times)}
        rows = []
        for t in targets:
            if int(t) not in time_to_row or time_to_row[int(t)] < K:
                raise InsufficientHistoryError(f"target t={t} lacks K={K} prior rows")
            rows.append(time_to_row[int(t)])
        return rows
    rows = list(range(K, mm.T))
    if config.fit_window == "half_window":
        rows = rows[-max(1, K // 2) :]
    return rows


def _quadratic_terms(
    mm: MomentMatrix, K: int, rows: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, float, int]:
    Q = np.zeros((K, K))
    b = np.zeros(K)
    c = 0.0
    n_terms = 0
    for i in rows:
        # lag matrix: row k-1 holds the moments k steps back
        lags = mm.values[i - K : i][::-1]
        lag_ok = mm.valid[i - K : i].all(axis=0)
        ok = mm.valid[i] & lag_ok
        if not ok.any():
            continue
        a = lags[:, ok]
        target = mm.values[i, ok]
        Q += a @ a.T
        b += a @ target
        c += float(target @ target)
        n_terms += int(ok.sum())
    return Q, b, c, n_terms


def nonparametric_objective(
    mm: MomentMatrix, beta: np.ndarray, K: int, rows: Sequence[int]
) -> float:
    """Mean over valid (t, l) terms of (E^t[phi_l] - sum_k beta_k E^{t-k}[phi_l])^2."""
    total = 0.0
    count = 0
    for i in rows:
        for j in range(mm.L):
            if not (mm.valid[i, j] and mm.valid[i - K : i, j].all()):
                continue
            pred = sum(beta[k - 1] * mm.values[i - k, j] for k in range(1, K + 1))
            total += (mm.values[i, j] - pred) ** 2
            count += 1
    if count == 0:
        raise InsufficientHistoryError("no valid target cells")
    return total / count


def estimate_weights_nonparametric(
    mm: MomentMatrix,
    config: EstimationConfig,
    targets: Sequence[int] | None = None,
) -> WeightVector:
    K = config.K
    rows = _target_rows(mm, config, targets)
    Q, b, c, n_terms = _quadratic_terms(mm, K, rows)
    if n_terms == 0:
        raise InsufficientHistoryError("no valid target rows for the nonparametric objective")
    Q, b, c = Q / n_terms, b / n_terms, c / n_terms
    cs = config.constraints
    sol = solve_simplex_qp(Q, b, monotone=cs.monotone, cap=resolve_cap(cs, K))
    return WeightVector(
        sol.beta,
        meta={
            "method": "rider_nonparametric",
            "objective": sol.objective + c,
            "n_terms": n_terms,
            "n_targets": len(rows),
            "converged": sol.converged,
        },
    )


def clip_datasets(
    datasets: Sequence[TimedDataset],
    percentiles: tuple[float, float],
    extra: Sequence[TimedDataset] = (),
) -> tuple[list[TimedDataset], list[TimedDataset]]:
    """Clip features and outcomes at percentiles computed on `datasets` pooled.

    `extra` (e.g. a test dataset) is clipped with the same bounds.
    """
    x = np.vstack([d.features for d in datasets])
    y = np.concatenate([d.outcomes for d in datasets])
    lo, hi = percentiles
    x_lo, x_hi = np.percentile(x, [lo, hi], axis=0)
    y_lo, y_hi = np.percentile(y, [lo, hi])

    def clip(ds: TimedDataset) -> TimedDataset:
        return ds.with_data(np.clip(ds.features, x_lo, x_hi), np.clip(ds.outcomes, y_lo, y_hi))

    return [clip(d) for d in datasets], [clip(d) for d in extra]


@dataclass(frozen=True)
class CvRow:
    K: int
    alpha1: float
    alpha2: float
    alpha3: float
    theta: float
    cv_loss: float
    cv_se: float
    n_folds: int


def _metric_loss(score: float, metric: MetricName) -> float:
    return 1.0 - score if metric == "accuracy" else score


def cv_targets(panel: Panel, max_K: int, holdout_fraction: float) -> list[int]:
    """Forward-chaining targets: the last `holdout_fraction` of the panel with full history."""
    T = len(panel)
    n_hold = max(1, math.ceil(holdout_fraction * T))
    positions = [p for p in range(T - n_hold, T) if p >= max_K]
    if not positions:
        raise InsufficientHistoryError(
            f"panel of length {T} has no CV targets with {max_K} prior datasets"
        )
    return [panel[p].t for p in positions]


def forward_chain_losses(
    panel: Panel,
    beta: WeightVector,
    targets: Sequence[int],
    problem: WermProblem,
    metric: MetricName,
) -> np.ndarray:
    """One-step-ahead losses of the weighted fit on the K datasets before each target."""
    out = np.empty(len(targets))
    for i, t in enumerate(targets):
        window = panel.window(t, beta.K)
        model = fit_weighted_erm(window, beta, problem, fitted_at=t)
        out[i] = _metric_loss(evaluate(model, panel[panel.index_of(t)], metric), metric)
    return out


def _summarize(losses: np.ndarray) -> tuple[float, float]:
    n = losses.shape[0]
    se = float(np.std(losses, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(losses.mean()), se


def _score_candidate(
    panel: Panel,
    config: ParametricWeightConfig,
    targets: Sequence[int],
    problem: WermProblem,
    metric: MetricName,
) -> CvRow:
    try:
        losses = forward_chain_losses(panel, parametric_weights(config), targets, problem, metric)
        loss, se = _summarize(losses)
    except RiderError as exc:
        log_event(
            event="cv_candidate_failed",
            details={"K": config.K, "alpha1": config.alpha1, "error": str(exc)},
            level=logging.WARNING,
        )
        loss, se = math.inf, math.inf
    return CvRow(
        config.K, config.alpha1, config.alpha2, config.alpha3, config.theta, loss, se, len(targets)
    )


def parametric_candidates(grid: ParametricGrid) -> list[ParametricWeightConfig]:
    out = []
    params = {
        "K": list(grid.K),
        "alpha1": list(grid.alpha1),
        "alpha2": list(grid.alpha2),
        "h": list(grid.half_lives),
    }
    for p in ParameterGrid(params):
        if p["alpha1"] + p["alpha2"] > 1.0 + 1e-12:
            continue
        theta = ParametricWeightConfig.theta_from_half_life(p["h"])
        out.append(ParametricWeightConfig.from_alphas(p["alpha1"], p["alpha2"], theta, p["K"]))
    return out


def estimate_weights_parametric_cv(
    panel: Panel,
    grid: ParametricGrid | None = None,
    problem: WermProblem | None = None,
    cv: CvScheme | None = None,
) -> tuple[ParametricWeightConfig, WeightVector, list[CvRow]]:
    grid = grid or ParametricGrid()
    problem = problem or WermProblem()
    cv = cv or CvScheme()
    candidates = parametric_candidates(grid)
    if not candidates:
        raise RiderValidationError("parametric grid has no point with alpha1 + alpha2 <= 1")
    targets = cv_targets(panel, max(c.K for c in candidates), cv.holdout_fraction)
    rows: list[CvRow] = Parallel(n_jobs=cv.n_jobs)(
        delayed(_score_candidate)(panel, c, targets, problem, cv.metric) for c in candidates
    )
    for r in rows:
        log_event(
            event="cv_grid_scored",
            details={
                "K": r.K,
                "alpha1": r.alpha1,
                "alpha2": r.alpha2,
                "theta": r.theta,
                "cv_loss": r.cv_loss,
            },
            level=logging.DEBUG,
        )
    order = sorted(
        range(len(rows)), key=lambda i: (rows[i].cv_loss, rows[i].alpha2, rows[i].theta, rows[i].K)
    )
    best = order[0]
    if not math.isfinite(rows[best].cv_loss):
        raise SingularSystemError("every grid point failed during cross-validation")
    chosen = candidates[best]
    beta = parametric_weights(chosen)
    beta.meta.update({"method": "rider_parametric", "cv_loss": rows[best].cv_loss})
    return chosen, beta, rows


def select_half_life_cv(
    panel: Panel,
    half_lives: Sequence[float] = (6.0, 9.0, 12.0),
    K_values: Sequence[int] = (26, 39, 52, 65, 78),
    problem: WermProblem | None = None,
    cv: CvScheme | None = None,
) -> tuple[float, WeightVector, list[CvRow]]:
    """Choose (half-life, K) for exponential weights by forward-chaining CV.

    Window sizes longer than the panel allows are skipped. Rows describe each candidate
    as the pure-exponential member of the parametric family.
    """
    problem = problem or WermProblem()
    cv = cv or CvScheme()
    usable = [K for K in K_values if K < len(panel)]
    if not usable:
        raise InsufficientHistoryError(
            f"no window size in {list(K_values)} fits a panel of {len(panel)}"
        )
    targets = cv_targets(panel, max(usable), cv.holdout_fraction)
    scored: list[tuple[float, int, CvRow]] = []
    for H in half_lives:
        theta = ParametricWeightConfig.theta_from_half_life(H)
        for K in usable:
            beta = exponential_reference_weights(H, K)
            loss, se = _summarize(forward_chain_losses(panel, beta, targets, problem, cv.metric))
            scored.append((float(H), K, CvRow(K, 0.0, 0.0, 1.0, theta, loss, se, len(targets))))
    H, K, best = min(scored, key=lambda s: (s[2].cv_loss, s[1], s[0]))
    beta = exponential_reference_weights(H, K)
    beta.meta.update({"method": "exponential_cv", "cv_loss": best.cv_loss})
    log_event(event="half_life_selected", details={"half_life": H, "K": K, "cv_loss": best.cv_loss})
    return H, beta, [row for _, _, row in scored]
