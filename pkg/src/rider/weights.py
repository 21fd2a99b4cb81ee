"""Weight mathematics: Sigma^W, distributional variation, optimal and closed-form weights."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .config import ConstraintSet
from .errors import RiderValidationError, SingularSystemError
from .qp import repair_psd, solve_simplex_qp
from .rider_types import SigmaW, TimedDataset, WeightVector, ratio_vector
from .shift_sim import ArmaShiftProcess, autocov_vector
from .werm import WermModel

DIFFICULTY_MAX_COND = 1e12


def _rho_array(rho: Callable[[int], float] | Sequence[float] | np.ndarray, K: int) -> np.ndarray:
    if callable(rho):
        arr = np.array([float(rho(h)) for h in range(K + 1)])
    else:
        arr = np.asarray(rho, dtype=float).reshape(-1)
        if arr.shape[0] < K + 1:
            raise RiderValidationError(f"need autocovariances at lags 0..{K}, got {arr.shape[0]}")
        arr = arr[: K + 1]
    if not np.all(np.isfinite(arr)):
        raise RiderValidationError("autocovariances must be finite")
    if arr[0] < 0:
        raise RiderValidationError(f"rho(0) must be nonnegative, got {arr[0]:g}")
    if np.any(np.abs(arr) > arr[0] * (1 + 1e-9) + 1e-12):
        raise RiderValidationError("autocovariance violates |rho(h)| <= rho(0)")
    return arr


def build_sigma_w(rho: Callable[[int], float] | Sequence[float] | np.ndarray, K: int) -> SigmaW:
    """Covariance of the lag residuals W^{t-i} - W^t for i, j = 1..K.

    Entry (i, j) is rho(|i-j|) + rho(0) - rho(i) - rho(j).
    """
    if K < 1:
        raise RiderValidationError(f"K must be >= 1, got {K}")
    r = _rho_array(rho, K)
    idx = np.arange(1, K + 1)
    mat = r[np.abs(idx[:, None] - idx[None, :])] + r[0] - r[idx][:, None] - r[idx][None, :]
    mat = 0.5 * (mat + mat.T)
    return SigmaW(matrix=mat, rho=r)


def sigma_w_for_process(proc: ArmaShiftProcess, K: int) -> SigmaW:
    return build_sigma_w(autocov_vector(proc, K), K)


def _check_dims(beta: WeightVector, sigma_w: SigmaW) -> None:
    if beta.K != sigma_w.K:
        raise RiderValidationError(f"beta has K={beta.K} but Sigma^W is {sigma_w.K}x{sigma_w.K}")


def delta_sq(beta: WeightVector, sigma_w: SigmaW) -> float:
    """delta^2(beta) = beta' Sigma^W beta, clamped at zero."""
    _check_dims(beta, sigma_w)
    val = float(beta.beta @ sigma_w.matrix @ beta.beta)
    if val < -1e-10:
        raise RiderValidationError(f"negative distributional variation {val:.3e}")
    return max(val, 0.0)


def delta_tilde_sq(
    beta: WeightVector, sigma_w: SigmaW, ratios: float | Sequence[float] | np.ndarray
) -> float:
    r = ratio_vector(ratios, beta.K)
    return delta_sq(beta, sigma_w) + float(np.sum(beta.beta**2 * r))


def lag_ratios(sample_sizes: Sequence[int] | np.ndarray, m: int) -> np.ndarray:
    """r_k = m / n_k for sizes ordered most recent first."""
    n = np.asarray(sample_sizes, dtype=float)
    if np.any(n <= 0):
        raise RiderValidationError("sample sizes must be positive")
    return m / n


def resolve_cap(constraints: ConstraintSet | None, K: int) -> float | None:
    """The numeric cap on beta_1; a half-life cap maps to max_k of the exponential weights."""
    if constraints is None:
        return None
    if constraints.cap_half_life is not None:
        return float(np.max(exponential_reference_weights(constraints.cap_half_life, K).beta))
    return constraints.cap


def optimal_weights_qp(
    sigma_w: SigmaW,
    ratios: float | Sequence[float] | np.ndarray,
    constraints: ConstraintSet | None = None,
) -> WeightVector:
    K = sigma_w.K
    r = ratio_vector(ratios, K)
    sigma = repair_psd(sigma_w.matrix, "Sigma^W")
    q = sigma + np.diag(r)
    cs = constraints or ConstraintSet()
    sol = solve_simplex_qp(q, None, monotone=cs.monotone, cap=resolve_cap(cs, K))
    return WeightVector(
        sol.beta,
        meta={
            "method": "optimal_qp",
            "objective": sol.objective,
            "kkt_residual": sol.kkt_residual,
            "converged": sol.converged,
        },
    )


def closed_form_pooling(sample_sizes: Sequence[int] | np.ndarray) -> WeightVector:
    """beta_k = n_k / N, sizes ordered most recent first."""
    n = np.asarray(sample_sizes, dtype=float).reshape(-1)
    if n.size < 1 or np.any(n <= 0) or not np.all(np.isfinite(n)):
        raise RiderValidationError("sample sizes must be positive")
    return WeightVector(n / n.sum(), meta={"method": "pooling"})


def closed_form_recent(phi: float, K: int) -> WeightVector:
    """AR(1) weights: phi on the most recent dataset plus (1 - phi)/K everywhere."""
    if not (0.0 <= phi < 1.0):
        raise RiderValidationError(f"phi must lie in [0, 1), got {phi}")
    if K < 1:
        raise RiderValidationError(f"K must be >= 1, got {K}")
    beta = np.full(K, (1.0 - phi) / K)
    beta[0] += phi
    return WeightVector(beta, meta={"method": "recent", "phi": phi})


def closed_form_exp(phi: float, theta: float, K: int) -> WeightVector:
    """ARMA(1,1) weights (1/K)(1-phi)/(1-theta) + (phi-theta) theta^{k-1}.

    These sum to one only as K grows; at finite K they are renormalized.
    """
    if not (0.0 < theta < phi < 1.0):
        raise RiderValidationError(f"need 0 < theta < phi < 1, got phi={phi}, theta={theta}")
    if K < 1:
        raise RiderValidationError(f"K must be >= 1, got {K}")
    k = np.arange(K)
    raw = (1.0 - phi) / ((1.0 - theta) * K) + (phi - theta) * theta**k
    total = float(raw.sum())
    return WeightVector(
        raw / total, meta={"method": "exp", "phi": phi, "theta": theta, "raw_sum": total}
    )


@dataclass(frozen=True)
class ParametricWeightConfig:
    alpha1: float
    alpha2: float
    alpha3: float
    theta: float
    K: int

    def __post_init__(self) -> None:
        alphas = (self.alpha1, self.alpha2, self.alpha3)
        if any(a < -1e-12 for a in alphas):
            raise RiderValidationError(f"mixture weights must be nonnegative, got {alphas}")
        if abs(sum(alphas) - 1.0) > 1e-9:
            raise RiderValidationError(f"alpha1 + alpha2 + alpha3 must equal 1, got {sum(alphas)}")
        if not (0.0 < self.theta < 1.0):
            raise RiderValidationError(f"theta must lie in (0, 1), got {self.theta}")
        if self.K < 1:
            raise RiderValidationError(f"K must be >= 1, got {self.K}")

    @classmethod
    def from_alphas(
        cls, alpha1: float, alpha2: float, theta: float, K: int
    ) -> ParametricWeightConfig:
        alpha3 = 1.0 - alpha1 - alpha2
        if -1e-12 < alpha3 < 0:
            alpha3 = 0.0
        return cls(alpha1, alpha2, alpha3, theta, K)

    @staticmethod
    def theta_from_half_life(h: float) -> float:
        return 0.5 ** (1.0 / h)


def parametric_weights(config: ParametricWeightConfig) -> WeightVector:
    K = config.K
    geo = config.theta ** np.arange(K)
    beta = config.alpha1 / K + config.alpha3 * geo / geo.sum()
    beta[0] += config.alpha2
    return WeightVector(
        beta,
        meta={
            "method": "parametric",
            "alpha1": config.alpha1,
            "alpha2": config.alpha2,
            "alpha3": config.alpha3,
            "theta": config.theta,
        },
    )


def exponential_reference_weights(H: float, K: int) -> WeightVector:
    """beta_k proportional to (1/2)^{k/H}."""
    if not (H > 0 and math.isfinite(H)):
        raise RiderValidationError(f"half-life must be positive, got {H}")
    if K < 1:
        raise RiderValidationError(f"K must be >= 1, got {K}")
    # shift exponents so the largest term is 1
    raw = 0.5 ** ((np.arange(1, K + 1) - 1.0) / H)
    return WeightVector(raw / raw.sum(), meta={"method": "exponential", "half_life": H})


def estimate_problem_difficulty(model: WermModel, dataset: TimedDataset) -> float:
    """Plug-in sandwich tr(H^-1 V) at the fitted parameter.

    H is the mean per-sample loss Hessian and V the covariance of per-sample gradients.
    For squared loss (y - x'theta)^2 with homoskedastic noise this tends to 2 sigma^2 d.
    """
    x = model.design(dataset.features)
    y = dataset.outcomes
    theta = model.theta
    eta = x @ theta
    if model.problem.loss == "squared":
        grads = -2.0 * (y - eta)[:, None] * x
        hess = 2.0 * (x.T @ x) / x.shape[0]
    else:
        p = 1.0 / (1.0 + np.exp(-eta))
        grads = (p - y)[:, None] * x
        hess = (x * (p * (1.0 - p))[:, None]).T @ x / x.shape[0]
    cond = np.linalg.cond(hess)
    if not np.isfinite(cond) or cond >= DIFFICULTY_MAX_COND:
        raise SingularSystemError(f"loss Hessian is singular (condition number {cond:.3e})")
    centered = grads - grads.mean(axis=0)
    var = centered.T @ centered / x.shape[0]
    return float(np.trace(np.linalg.solve(hess, var)))
