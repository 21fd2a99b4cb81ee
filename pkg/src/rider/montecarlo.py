"""Monte Carlo checks of the inflation factor, estimator consistency and weight recovery."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .config import EstimationConfig
from .errors import RiderValidationError
from .estimator import (
    TestFunctionSpec,
    estimate_weights_nonparametric,
    evaluate_test_functions,
    whiten_test_functions,
)
from .rider_types import SigmaW, WeightVector
from .shift_sim import (
    ArmaShiftProcess,
    ParentDistribution,
    bin_means,
    draw_field,
    draw_tilted_uniforms,
    simulate_panel,
    tilted_mean,
)
from .weights import delta_tilde_sq, optimal_weights_qp, sigma_w_for_process

MIN_REPS = 100
_QUAD_BINS = 1024
_MC_STREAM = 3
_SWEEP_STREAM = 4


@dataclass(frozen=True)
class InflationEstimate:
    factor: float
    se: float
    reps: int
    parent_variance: float


@dataclass(frozen=True)
class ConsistencyRow:
    L: int
    T: int
    mean_gap: float
    se: float
    min_gap: float
    reps: int


def _sub_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def parent_moments(parent: ParentDistribution, spec: TestFunctionSpec) -> tuple[float, float]:
    """Mean and variance of phi under the untilted parent, by quadrature."""
    if spec.kind == "conditional":
        raise RiderValidationError("parent moments need an unconditional test function")
    m1 = bin_means(parent, lambda x, y: spec.values(x, y)[0], _QUAD_BINS)
    m2 = bin_means(parent, lambda x, y: spec.values(x, y)[0] ** 2, _QUAD_BINS)
    mean = float(m1.mean())
    return mean, max(float(m2.mean()) - mean**2, 0.0)


def _replicate(
    parent: ParentDistribution,
    proc: ArmaShiftProcess,
    beta: np.ndarray,
    m: int,
    n: int,
    spec: TestFunctionSpec,
    means: np.ndarray,
    rng: np.random.Generator,
) -> float:
    K = beta.shape[0]
    # row K is the target time; row K - k is k steps back
    field = draw_field(proc, K + 1, m, rng)
    exact = tilted_mean(field[K], means)
    est = 0.0
    for k in range(1, K + 1):
        if beta[k - 1] == 0.0:
            continue
        u = draw_tilted_uniforms(field[K - k], n, rng)
        x, y = parent.transform(u, rng.random((n, parent.aux_dim)))
        vals, _ = spec.values(x, y)
        est += beta[k - 1] * float(vals.mean())
    return math.sqrt(m) * (exact - est)


def inflation_factor_estimate(
    parent: ParentDistribution,
    proc: ArmaShiftProcess,
    beta: WeightVector,
    m: int,
    n: int,
    T_reps: int,
    phi: TestFunctionSpec,
    seed: int,
) -> InflationEstimate:
    """Var(sqrt(m)(E^t[phi] - sum_k beta_k hat-E^{t-k}[phi])) / Var(phi) over independent fields.

    E^t[phi] is exact given the latent weights; each replication has its own generator.
    """
    if T_reps < MIN_REPS:
        raise RiderValidationError(f"need at least {MIN_REPS} replications, got {T_reps}")
    if m < 1 or n < 1:
        raise RiderValidationError("m and n must be positive")
    _, var0 = parent_moments(parent, phi)
    if not var0 > 0:
        raise RiderValidationError(f"test function '{phi.label}' has zero parent variance")
    means = bin_means(parent, lambda x, y: phi.values(x, y)[0], m)
    diffs = np.empty(T_reps)
    for rep in range(T_reps):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(_MC_STREAM, rep))
        )
        diffs[rep] = _replicate(parent, proc, beta.beta, m, n, phi, means, rng)
    centered = diffs - diffs.mean()
    s2 = float(np.mean(centered**2)) * T_reps / (T_reps - 1)
    m4 = float(np.mean(centered**4))
    se = math.sqrt(max(m4 - s2**2, 0.0) / T_reps)
    return InflationEstimate(s2 / var0, se / var0, T_reps, var0)


def empirical_inflation_factor(
    parent: ParentDistribution,
    proc: ArmaShiftProcess,
    beta: WeightVector,
    m: int,
    n: int,
    T_reps: int,
    phi: TestFunctionSpec,
    seed: int,
) -> float:
    return inflation_factor_estimate(parent, proc, beta, m, n, T_reps, phi, seed).factor


def quantile_bin_functions(parent: ParentDistribution, L: int) -> list[TestFunctionSpec]:
    """Indicators of L disjoint parent-quantile bins of feature 0."""
    u_edges = np.linspace(0.0, 1.0, L + 2)
    lo_aux = np.full((L + 2, parent.aux_dim), 0.25)
    hi_aux = np.full((L + 2, parent.aux_dim), 0.75)
    edges = parent.transform(u_edges, lo_aux)[0][:, 0]
    if not np.allclose(edges, parent.transform(u_edges, hi_aux)[0][:, 0]):
        raise RiderValidationError("quantile bins need a parent whose feature 0 depends on U only")
    return [
        TestFunctionSpec("indicator", index=0, low=float(edges[i]), high=float(edges[i + 1]))
        for i in range(L)
    ]


def _estimate_gap(
    parent: ParentDistribution,
    proc: ArmaShiftProcess,
    K: int,
    L: int,
    T: int,
    m: int,
    n: int,
    seed: int,
    target: float,
    sigma_w: SigmaW,
) -> tuple[float, np.ndarray]:
    panel, _ = simulate_panel(parent, proc, T, m, n, seed)
    specs = quantile_bin_functions(parent, L)
    mm = whiten_test_functions(panel, specs).transform(evaluate_test_functions(panel, specs))
    beta_hat = estimate_weights_nonparametric(
        mm, EstimationConfig(K=K, standardize=False, whiten=False)
    )
    value = delta_tilde_sq(beta_hat, sigma_w, m / n)
    return value - target, beta_hat.beta


def consistency_sweep(
    proc: ArmaShiftProcess,
    parent: ParentDistribution,
    K: int,
    settings: Sequence[tuple[int, int]],
    seed: int,
    *,
    reps: int = 30,
    m: int = 200,
    n: int = 2000,
    n_jobs: int = 1,
) -> list[ConsistencyRow]:
    """Gap delta~^2(beta_hat) - delta~^2(beta*) for each (L, T), averaged over replications."""
    if reps < 2:
        raise RiderValidationError("need at least two replications")
    sigma_w = sigma_w_for_process(proc, K)
    r = m / n
    beta_star = optimal_weights_qp(sigma_w, r)
    target = delta_tilde_sq(beta_star, sigma_w, r)
    rows = []
    for L, T in settings:
        if T <= K:
            raise RiderValidationError(f"T={T} must exceed K={K}")
        results = Parallel(n_jobs=n_jobs)(
            delayed(_estimate_gap)(
                parent,
                proc,
                K,
                L,
                T,
                m,
                n,
                _sub_seed(seed, _SWEEP_STREAM, L, T, rep),
                target,
                sigma_w,
            )
            for rep in range(reps)
        )
        gaps = np.array([g for g, _ in results])
        rows.append(
            ConsistencyRow(
                L=int(L),
                T=int(T),
                mean_gap=float(gaps.mean()),
                se=float(gaps.std(ddof=1) / math.sqrt(reps)),
                min_gap=float(gaps.min()),
                reps=reps,
            )
        )
    return rows


def recovery_experiment(
    proc: ArmaShiftProcess,
    parent: ParentDistribution,
    K: int,
    L: int,
    T: int,
    m: int,
    n: int,
    seeds: Sequence[int],
    n_jobs: int = 1,
) -> np.ndarray:
    """Mean estimated weight vector over independent simulated panels."""
    sigma_w = sigma_w_for_process(proc, K)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_estimate_gap)(parent, proc, K, L, T, m, n, int(s), 0.0, sigma_w)
        for s in seeds
    )
    return np.mean([b for _, b in results], axis=0)
