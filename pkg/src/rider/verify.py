"""Self-checks behind `rider verify`: closed-form oracles, the CLT inflation factor and,
with `full=True`, estimator consistency and weight recovery on simulated panels."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .config import VerifyConfig
from .estimator import TestFunctionSpec
from .logging_utils import log_event
from .montecarlo import consistency_sweep, inflation_factor_estimate, recovery_experiment
from .rider_types import WeightVector
from .shift_sim import ArmaShiftProcess, InnovationSpec, uniform_parent
from .weights import (
    ParametricWeightConfig,
    build_sigma_w,
    closed_form_exp,
    closed_form_pooling,
    closed_form_recent,
    delta_tilde_sq,
    exponential_reference_weights,
    optimal_weights_qp,
    parametric_weights,
    sigma_w_for_process,
)

AR1_PHIS = (0.3, 0.6, 0.9)
ARMA11_PAIRS = ((0.8, 0.4), (0.6, 0.2))
CLOSED_FORM_K = 50
CLOSED_FORM_K_SMALL = 10
CLOSED_FORM_TOL = 0.02
POOLING_TOL = 1e-8
EXACT_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    expected: float
    tol: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name} measured={self.measured:.6g} "
            f"expected={self.expected:.6g} tol={self.tol:.3g}"
        )


def _record(name: str, measured: float, expected: float, tol: float, passed: bool) -> CheckResult:
    res = CheckResult(name, bool(passed), float(measured), float(expected), float(tol))
    log_event(
        event="verify_check",
        details={
            "check": name,
            "passed": res.passed,
            "measured": res.measured,
            "expected": res.expected,
            "tol": res.tol,
        },
    )
    return res


def _sup(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def check_pooling_oracle(seed: int = 0, cases: int = 20) -> CheckResult:
    """No shift (Sigma^W = 0) and r_k = 1/n_k: the optimum is n_k / N."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        K = int(rng.integers(2, 30))
        sizes = rng.integers(10, 5000, size=K)
        sigma_w = build_sigma_w(np.zeros(K + 1), K)
        beta = optimal_weights_qp(sigma_w, 1.0 / sizes)
        worst = max(worst, _sup(beta.beta, closed_form_pooling(sizes).beta))
    return _record("pooling_oracle", worst, 0.0, POOLING_TOL, worst <= POOLING_TOL)


def _closed_form_gap(
    proc: ArmaShiftProcess, closed: Callable[[int], WeightVector], K: int
) -> float:
    beta = optimal_weights_qp(sigma_w_for_process(proc, K), 0.0)
    return _sup(beta.beta, closed(K).beta)


def check_ar1_oracles() -> list[CheckResult]:
    out = []
    for phi in AR1_PHIS:
        proc = ArmaShiftProcess.ar1(phi)

        def closed(K: int, phi: float = phi) -> WeightVector:
            return closed_form_recent(phi, K)

        big = _closed_form_gap(proc, closed, CLOSED_FORM_K)
        small = _closed_form_gap(proc, closed, CLOSED_FORM_K_SMALL)
        ok = big <= CLOSED_FORM_TOL
        out.append(_record(f"ar1_oracle[phi={phi:g}]", big, 0.0, CLOSED_FORM_TOL, ok))
        out.append(_record(f"ar1_gap_shrinks[phi={phi:g}]", big, small, 0.0, big < small))
    return out


def check_arma11_oracles() -> list[CheckResult]:
    out = []
    for phi, theta in ARMA11_PAIRS:
        proc = ArmaShiftProcess(phi=(phi,), alpha=(-theta,), innovation=InnovationSpec(1.0))

        def closed(K: int, phi: float = phi, theta: float = theta) -> WeightVector:
            return closed_form_exp(phi, theta, K)

        big = _closed_form_gap(proc, closed, CLOSED_FORM_K)
        small = _closed_form_gap(proc, closed, CLOSED_FORM_K_SMALL)
        tag = f"phi={phi:g},theta={theta:g}"
        ok = big <= CLOSED_FORM_TOL
        out.append(_record(f"arma11_oracle[{tag}]", big, 0.0, CLOSED_FORM_TOL, ok))
        out.append(_record(f"arma11_gap_shrinks[{tag}]", big, small, 0.0, big < small))
    return out


def check_clt(config: VerifyConfig, seed: int) -> list[CheckResult]:
    """Monte-Carlo inflation factor against delta~^2 under white weights with r = 1."""
    proc = ArmaShiftProcess.white(1.0)
    parent = uniform_parent(1)
    phi = TestFunctionSpec("covariate", index=0)
    m = n = config.clt_m
    out = []
    betas = (("e1", WeightVector(np.array([1.0]))), ("uniform4", WeightVector.uniform(4)))
    for name, beta in betas:
        expected = delta_tilde_sq(beta, sigma_w_for_process(proc, beta.K), m / n)
        est = inflation_factor_estimate(parent, proc, beta, m, n, config.clt_reps, phi, seed)
        rel = abs(est.factor - expected) / expected
        ok = rel <= config.clt_tolerance
        out.append(
            _record(f"clt_inflation[{name}]", est.factor, expected, config.clt_tolerance, ok)
        )
    return out


def check_formulas() -> list[CheckResult]:
    cases = [
        ("exponential_weights[H=1,K=2]", exponential_reference_weights(1.0, 2), [2 / 3, 1 / 3]),
        (
            "parametric_weights[geometric,K=3]",
            parametric_weights(ParametricWeightConfig(0.0, 0.0, 1.0, 0.5, 3)),
            [4 / 7, 2 / 7, 1 / 7],
        ),
        ("recent_weights[phi=0.6,K=5]", closed_form_recent(0.6, 5), [0.68] + [0.08] * 4),
    ]
    out = []
    for name, beta, want in cases:
        gap = _sup(beta.beta, np.array(want))
        out.append(_record(name, gap, 0.0, EXACT_TOL, gap <= EXACT_TOL))
    return out


def check_consistency(config: VerifyConfig, seed: int) -> list[CheckResult]:
    proc = ArmaShiftProcess.ar1(0.5)
    parent = uniform_parent(1)
    K = 4
    out = []
    for axis, settings in (("L", [(4, 100), (64, 100)]), ("T", [(8, 50), (8, 800)])):
        rows = consistency_sweep(proc, parent, K, settings, seed, reps=config.consistency_reps)
        lo = min(r.min_gap for r in rows)
        out.append(_record(f"consistency_nonnegative[{axis}]", lo, 0.0, 1e-8, lo >= -1e-8))
        first, last = rows[0].mean_gap, rows[-1].mean_gap
        out.append(_record(f"consistency_decreasing[{axis}]", last, first, 0.0, last < first))
    return out


def check_recovery(config: VerifyConfig, seed: int) -> CheckResult:
    phi, K = 0.7, 20
    beta = recovery_experiment(
        ArmaShiftProcess.ar1(phi),
        uniform_parent(1),
        K=K,
        L=64,
        T=400,
        m=200,
        n=20_000,
        seeds=[seed + s for s in range(config.recovery_seeds)],
    )
    gap = _sup(beta, closed_form_recent(phi, K).beta)
    return _record("nonparametric_recovery", gap, 0.0, 0.05, gap <= 0.05)


def run_checks(
    config: VerifyConfig | None = None, seed: int = 0, full: bool = False
) -> list[CheckResult]:
    config = config or VerifyConfig()
    results = [check_pooling_oracle(seed)]
    results += check_ar1_oracles()
    results += check_arma11_oracles()
    results += check_clt(config, seed)
    results += check_formulas()
    if full:
        results += check_consistency(config, seed)
        results.append(check_recovery(config, seed))
    return results
