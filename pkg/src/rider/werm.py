from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import linalg
from sklearn.metrics import accuracy_score, log_loss, mean_squared_error

from .config import MetricName, WermProblem
from .errors import ConvergenceError, RiderValidationError, SingularSystemError
from .logging_utils import log_event
from .rider_types import TimedDataset, WeightVector

JITTERS = (0.0, 1e-12, 1e-10, 1e-8)
LOGISTIC_GRAD_TOL = 1e-8
LOGISTIC_MAX_ITER = 500
_RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class WermModel:
    theta: np.ndarray  # intercept first when problem.intercept
    problem: WermProblem
    fitted_at: int | None
    weights_used: WeightVector

    def __post_init__(self) -> None:
        th = np.asarray(self.theta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(th)):
            raise RiderValidationError("fitted coefficients must be finite")
        object.__setattr__(self, "theta", th)

    @property
    def d(self) -> int:
        return int(self.theta.shape[0]) - (1 if self.problem.intercept else 0)

    def design(self, features: np.ndarray) -> np.ndarray:
        return _design(features, self.problem.intercept, self.d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta": self.theta.tolist(),
            "problem": self.problem.model_dump(),
            "fitted_at": self.fitted_at,
            "weights_used": {
                "K": self.weights_used.K,
                "beta": self.weights_used.beta.tolist(),
                "meta": self.weights_used.meta,
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> WermModel:
        w = data["weights_used"]
        return cls(
            theta=np.asarray(data["theta"], dtype=float),
            problem=WermProblem.model_validate(data["problem"]),
            fitted_at=data.get("fitted_at"),
            weights_used=WeightVector(np.asarray(w["beta"], dtype=float), meta=w.get("meta", {})),
        )


def _design(features: np.ndarray, intercept: bool, d: int | None = None) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if d is not None and x.shape[1] != d:
        raise RiderValidationError(f"expected {d} features, got {x.shape[1]}")
    if intercept:
        return np.column_stack([np.ones(x.shape[0]), x])
    return x


def _penalty(p: int, intercept: bool) -> np.ndarray:
    pen = np.ones(p)
    if intercept:
        pen[0] = 0.0
    return pen


def sample_weights(
    window: Sequence[TimedDataset], beta: np.ndarray, weighting: str
) -> list[np.ndarray]:
    """Per-sample weights for each dataset of a chronological window, normalized to total 1.

    beta[k-1] belongs to window[-k]; dataset_mean spreads beta_k over the n_k samples.
    """
    K = len(window)
    out = []
    for pos, ds in enumerate(window):
        b = float(beta[K - 1 - pos])
        per = b / ds.n if weighting == "dataset_mean" else b
        out.append(np.full(ds.n, per))
    total = float(sum(w.sum() for w in out))
    if total <= 0:
        raise RiderValidationError("all weights are zero")
    return [w / total for w in out]


def _cholesky_solve(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    scale = max(float(np.trace(a)) / a.shape[0], 1e-300)
    for jitter in JITTERS:
        try:
            factor = linalg.cho_factor(a + jitter * scale * np.eye(a.shape[0]), lower=True)
        except linalg.LinAlgError:
            continue
        if jitter > 0:
            log_event(
                event="cholesky_jitter", details={"jitter": jitter}, level=logging.DEBUG
            )
        return np.asarray(linalg.cho_solve(factor, rhs), dtype=float)
    raise SingularSystemError(
        "weighted normal equations are singular even with jitter; increase regularization"
    )


def _fit_squared(x: np.ndarray, y: np.ndarray, w: np.ndarray, problem: WermProblem) -> np.ndarray:
    xw = x * w[:, None]
    gram = x.T @ xw
    rhs = xw.T @ y
    pen = _penalty(x.shape[1], problem.intercept)
    if problem.regularization == 0.0:
        rank = np.linalg.matrix_rank(x * np.sqrt(w)[:, None], tol=None)
        if rank < x.shape[1]:
            raise SingularSystemError(
                f"weighted design has rank {rank} < {x.shape[1]} parameters; "
                "set a positive regularization"
            )
    a = gram + problem.regularization * np.diag(pen)
    return _cholesky_solve(a, rhs)


def _logistic_objective(
    theta: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray, lam: np.ndarray
) -> float:
    eta = x @ theta
    return float(w @ (np.logaddexp(0.0, eta) - y * eta) + theta @ (lam * theta))


def _fit_logistic(x: np.ndarray, y: np.ndarray, w: np.ndarray, problem: WermProblem) -> np.ndarray:
    if not np.all((y == 0.0) | (y == 1.0)):
        raise RiderValidationError("logistic loss needs outcomes in {0, 1}")
    lam = problem.regularization * _penalty(x.shape[1], problem.intercept)
    theta = np.zeros(x.shape[1])
    obj = _logistic_objective(theta, x, y, w, lam)
    for _ in range(LOGISTIC_MAX_ITER):
        p = 1.0 / (1.0 + np.exp(-(x @ theta)))
        grad = x.T @ (w * (p - y)) + 2.0 * lam * theta
        if float(np.max(np.abs(grad))) <= LOGISTIC_GRAD_TOL:
            return theta
        hess = (x * (w * p * (1.0 - p))[:, None]).T @ x + 2.0 * np.diag(lam)
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # step halving keeps the objective monotone
        t = 1.0
        while True:
            cand = theta - t * step
            cand_obj = _logistic_objective(cand, x, y, w, lam)
            if cand_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        theta, obj = cand, cand_obj
    raise ConvergenceError(
        f"logistic fit did not reach gradient norm {LOGISTIC_GRAD_TOL:g} in "
        f"{LOGISTIC_MAX_ITER} iterations (separable data? add regularization)"
    )


def fit_weighted_erm(
    window: Sequence[TimedDataset],
    beta: WeightVector | np.ndarray,
    problem: WermProblem | None = None,
    fitted_at: int | None = None,
) -> WermModel:
    """Minimize sum_k beta_k * mean loss on window[-k] (or the per-sample variant)."""
    problem = problem or WermProblem()
    if not window:
        raise RiderValidationError("window is empty")
    raw = beta.beta if isinstance(beta, WeightVector) else np.asarray(beta, dtype=float).reshape(-1)
    if raw.shape[0] != len(window):
        raise RiderValidationError(f"{raw.shape[0]} weights for a window of {len(window)} datasets")
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise RiderValidationError("weights must be finite and nonnegative")
    dims = {ds.d for ds in window}
    if len(dims) != 1:
        raise RiderValidationError(f"window datasets disagree on feature dimension: {sorted(dims)}")

    ws = sample_weights(window, raw, problem.weighting)
    keep = [i for i, w in enumerate(ws) if w[0] > 0]
    x = _design(np.vstack([window[i].features for i in keep]), problem.intercept)
    y = np.concatenate([window[i].outcomes for i in keep])
    w = np.concatenate([ws[i] for i in keep])
    if problem.loss == "squared":
        theta = _fit_squared(x, y, w, problem)
    else:
        theta = _fit_logistic(x, y, w, problem)
    used = beta if isinstance(beta, WeightVector) else WeightVector.normalized(raw)
    return WermModel(theta=theta, problem=problem, fitted_at=fitted_at, weights_used=used)


def predict(model: WermModel, features: np.ndarray) -> np.ndarray:
    eta = model.design(features) @ model.theta
    if model.problem.loss == "logistic":
        return 1.0 / (1.0 + np.exp(-eta))
    return eta


def score_arrays(
    model: WermModel, features: np.ndarray, outcomes: np.ndarray, metric: MetricName
) -> float:
    y = np.asarray(outcomes, dtype=float).reshape(-1)
    if y.shape[0] == 0:
        raise RiderValidationError("cannot evaluate on an empty dataset")
    pred = predict(model, features)
    if metric == "mse":
        return float(mean_squared_error(y, pred))
    if metric == "accuracy":
        return float(accuracy_score(y.astype(int), (pred >= 0.5).astype(int)))
    if metric == "logloss":
        prob = np.clip(pred, 1e-15, 1.0 - 1e-15)
        return float(log_loss(y.astype(int), prob, labels=[0, 1]))
    raise RiderValidationError(f"unknown metric '{metric}'")


def evaluate(model: WermModel, dataset: TimedDataset, metric: MetricName = "mse") -> float:
    return score_arrays(model, dataset.features, dataset.outcomes, metric)
