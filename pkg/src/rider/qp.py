"""Quadratic programs over the probability simplex.

Solves  min_beta  beta' Q beta - 2 b' beta  subject to beta >= 0, sum(beta) = 1 and,
optionally, beta_1 <= cap and beta_1 >= beta_2 >= ... >= beta_K.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from sklearn.isotonic import isotonic_regression

from .errors import InfeasibleConstraintsError, RiderValidationError
from .logging_utils import log_event

PSD_TOL = 1e-10
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
_POLISH_EVERY = 200
_POLISH_COND = 1e12


@dataclass(frozen=True)
class QpSolution:
    beta: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool


def repair_psd(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetrize; lift tiny negative eigenvalues from roundoff, reject real negativity."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise RiderValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise RiderValidationError(f"{name} contains non-finite entries")
    a = 0.5 * (a + a.T)
    lam_min = float(linalg.eigvalsh(a)[0])
    if lam_min < -PSD_TOL:
        raise RiderValidationError(
            f"{name} is not positive semidefinite (min eigenvalue {lam_min:.3e})"
        )
    if lam_min < 0:
        a = a + PSD_TOL * np.eye(a.shape[0])
    return a


def check_feasible(K: int, *, monotone: bool = False, cap: float | None = None) -> None:
    if K < 1:
        raise RiderValidationError(f"K must be >= 1, got {K}")
    if cap is None:
        return
    if cap < 0:
        raise InfeasibleConstraintsError(f"cap B={cap:g} is negative")
    if K == 1 and cap < 1.0:
        raise InfeasibleConstraintsError(f"K=1 forces beta_1 = 1 but the cap is B={cap:g}")
    if monotone and cap * K < 1.0 - 1e-12:
        raise InfeasibleConstraintsError(
            f"monotone weights need beta_1 >= 1/K = {1.0 / K:.6g}, which conflicts with "
            f"cap B={cap:g}"
        )


def project_simplex(v: np.ndarray, s: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum(w) = s} by sorting."""
    v = np.asarray(v, dtype=float)
    (n,) = v.shape
    if abs(v.sum() - s) <= 1e-15 and np.all(v >= 0):
        return v.copy()
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, n + 1) > (cssv - s))[0][-1]
    theta = (cssv[rho] - s) / (rho + 1.0)
    return np.clip(v - theta, 0.0, None)


def _project_set(w: np.ndarray, monotone: bool, cap: float | None) -> np.ndarray:
    """Projection onto {beta >= 0, beta_1 <= cap} or its intersection with the decreasing cone."""
    if monotone:
        upper = np.inf if cap is None else cap
        return np.asarray(
            isotonic_regression(w, y_min=0.0, y_max=upper, increasing=False), dtype=float
        )
    out = np.clip(w, 0.0, None)
    if cap is not None:
        out[0] = min(out[0], cap)
    return out


def project_feasible(
    v: np.ndarray, *, monotone: bool = False, cap: float | None = None
) -> np.ndarray:
    """Exact projection onto the simplex intersected with the optional cap/monotone sets.

    The simplex equality is handled through its multiplier tau: the projection equals
    the projection of v - tau onto the remaining constraints, with tau chosen so the
    result sums to one.
    """
    v = np.asarray(v, dtype=float)
    if not monotone and cap is None:
        return project_simplex(v)
    check_feasible(v.shape[0], monotone=monotone, cap=cap)
    if monotone:
        # the decreasing cone commutes with shifts along the ones vector
        base = np.asarray(isotonic_regression(v, increasing=False), dtype=float)
        upper = np.inf if cap is None else cap

        def mass(tau: float) -> float:
            return float(np.clip(base - tau, 0.0, upper).sum()) - 1.0

        def at(tau: float) -> np.ndarray:
            return np.clip(base - tau, 0.0, upper)

    else:

        def mass(tau: float) -> float:
            return float(_project_set(v - tau, False, cap).sum()) - 1.0

        def at(tau: float) -> np.ndarray:
            return _project_set(v - tau, False, cap)

    hi = float(np.max(v)) + 1.0
    lo = float(np.min(v)) - 2.0
    if mass(lo) < 0:
        lo = float(np.min(v)) - 2.0 - (abs(float(np.min(v))) + 1.0) * 1e3
        if mass(lo) < 0:
            raise InfeasibleConstraintsError("constraint set is empty")
    tau = float(optimize.brentq(mass, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return at(tau)


def objective(Q: np.ndarray, b: np.ndarray, beta: np.ndarray) -> float:
    return float(beta @ Q @ beta - 2.0 * b @ beta)


def kkt_residual(
    Q: np.ndarray,
    b: np.ndarray,
    beta: np.ndarray,
    *,
    monotone: bool = False,
    cap: float | None = None,
) -> float:
    """Natural residual ||beta - P(beta - grad f(beta))||_inf; zero exactly at the optimum."""
    grad = 2.0 * (Q @ beta - b)
    step = project_feasible(beta - grad, monotone=monotone, cap=cap)
    return float(np.max(np.abs(beta - step)))


def _polish_simplex(Q: np.ndarray, b: np.ndarray, beta: np.ndarray) -> np.ndarray | None:
    """Solve the equality-constrained KKT system on the support of beta."""
    support = np.nonzero(beta > 1e-12)[0]
    s = support.shape[0]
    if s == 0:
        return None
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = 2.0 * Q[np.ix_(support, support)]
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.r_[2.0 * b[support], 1.0]
    if np.linalg.cond(kkt) >= _POLISH_COND:
        return None
    sol = linalg.solve(kkt, rhs)[:s]
    if np.any(sol < -1e-14):
        return None
    out = np.zeros_like(beta)
    out[support] = np.clip(sol, 0.0, None)
    total = out.sum()
    if total <= 0:
        return None
    return out / total


def solve_simplex_qp(
    Q: np.ndarray,
    b: np.ndarray | None = None,
    *,
    monotone: bool = False,
    cap: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> QpSolution:
    """Accelerated projected gradient (FISTA with adaptive restart).

    Starts from the feasible point nearest to uniform weights and never returns a point
    with a larger objective than that start.
    """
    Q = repair_psd(Q, "Q")
    K = Q.shape[0]
    b = np.zeros(K) if b is None else np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != K:
        raise RiderValidationError(f"b has {b.shape[0]} entries, Q is {K}x{K}")
    check_feasible(K, monotone=monotone, cap=cap)

    def proj(v: np.ndarray) -> np.ndarray:
        return project_feasible(v, monotone=monotone, cap=cap)

    start = proj(np.full(K, 1.0 / K))
    start_obj = objective(Q, b, start)
    if K == 1:
        return QpSolution(start, start_obj, 0, 0.0, True)
    if not np.any(Q) and not np.any(b):
        return QpSolution(start, start_obj, 0, 0.0, True)

    lam_max = float(linalg.eigvalsh(Q)[-1])
    lip = 2.0 * lam_max if lam_max > 0 else 2.0
    # scale-free stopping rule
    stop = tol * max(1.0, float(np.max(np.abs(Q))), float(np.max(np.abs(b))))
    simplex_only = not monotone and cap is None

    x = start.copy()
    y = start.copy()
    t = 1.0
    best, best_obj = start.copy(), start_obj
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (Q @ y - b)
        x_new = proj(y - grad / lip)
        obj = objective(Q, b, x_new)
        if obj < best_obj:
            best, best_obj = x_new.copy(), obj
        if lip * float(np.max(np.abs(y - x_new))) <= stop:
            if kkt_residual(Q, b, x_new, monotone=monotone, cap=cap) <= stop:
                converged = True
                break
        # restart momentum when it points uphill
        if float((y - x_new) @ (x_new - x)) > 0:
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        if simplex_only and it % _POLISH_EVERY == 0:
            cand = _polish_simplex(Q, b, best)
            if cand is not None and objective(Q, b, cand) <= best_obj + 1e-15:
                if kkt_residual(Q, b, cand) <= stop:
                    best, best_obj = cand, objective(Q, b, cand)
                    converged = True
                    break

    if simplex_only:
        cand = _polish_simplex(Q, b, best)
        if cand is not None and objective(Q, b, cand) <= best_obj + 1e-15:
            best, best_obj = cand, objective(Q, b, cand)

    if best_obj > start_obj:
        best, best_obj = start, start_obj
    resid = kkt_residual(Q, b, best, monotone=monotone, cap=cap)
    converged = converged or resid <= stop
    if not converged:
        log_event(
            event="qp_not_converged",
            details={"K": K, "iterations": it, "kkt_residual": resid},
            level=logging.WARNING,
        )
    return QpSolution(best, best_obj, it, resid, converged)
