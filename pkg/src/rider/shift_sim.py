"""Synthetic panels under random temporal distribution shift.

Bin weights W_j^t follow a nonnegative ARMA process with stationary mean 1. Each
dataset is drawn i.i.d. from the parent distribution tilted by the current row of
weights: pick bin J with probability W_J / sum(W), draw U uniform on bin J, and map
D = h(U) through the parent's quantile transform.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal, stats
from statsmodels.tsa.arima_process import ArmaProcess, arma_acovf

from .config import ParentConfig, ProcessConfig
from .errors import NonStationaryProcessError, RiderValidationError
from .logging_utils import log_event
from .rider_types import Panel, TimedDataset, WeightField

BURN_IN = 1000
STATIONARITY_TOL = 1e-9
# truncated innovations below this share of the requested variance are logged
TRUNCATED_VARIANCE_WARN = 0.5
_U_EPS = 2.0**-53

# stream ids for SeedSequence spawn keys
_BIN_STREAM = 0
_DATASET_STREAM = 1
_AUX_STREAM = 2


@dataclass(frozen=True)
class InnovationSpec:
    """Gamma innovations with the given variance.

    shape=None picks the largest admissible shape, which puts the constant term c at 0
    (or, for the negative-MA case, halves the untruncated innovation mean).
    """

    variance: float = 1.0
    shape: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.variance) and self.variance >= 0):
            raise RiderValidationError(f"innovation variance must be >= 0, got {self.variance}")
        if self.shape is not None and not (self.shape > 0):
            raise RiderValidationError(f"innovation shape must be > 0, got {self.shape}")


@dataclass(frozen=True)
class ArmaShiftProcess:
    phi: tuple[float, ...] = ()
    alpha: tuple[float, ...] = ()
    innovation: InnovationSpec = field(default_factory=InnovationSpec)
    target_mean: float = 1.0

    def __post_init__(self) -> None:
        phi = tuple(float(v) for v in self.phi)
        alpha = tuple(float(v) for v in self.alpha)
        if not all(math.isfinite(v) for v in phi + alpha):
            raise RiderValidationError("ARMA coefficients must be finite")
        if any(v < 0 for v in phi):
            raise RiderValidationError(f"AR coefficients must be nonnegative, got {phi}")
        if any(v < 0 for v in alpha) and not self.negative_ma:
            raise RiderValidationError(
                "MA coefficients must be nonnegative; a negative MA term is only "
                "supported for ARMA(1,1)"
            )
        if self.negative_ma and not (-1.0 < alpha[0] < 0.0):
            raise RiderValidationError(
                f"negative MA coefficient must lie in (-1, 0), got {alpha[0]}"
            )
        if self.target_mean != 1.0:
            raise RiderValidationError("weights are normalized to stationary mean 1")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "alpha", alpha)

    @property
    def p(self) -> int:
        return len(self.phi)

    @property
    def q(self) -> int:
        return len(self.alpha)

    @property
    def negative_ma(self) -> bool:
        return len(self.phi) == 1 and len(self.alpha) == 1 and float(self.alpha[0]) < 0

    @property
    def c(self) -> float:
        return innovation_law(self).c

    @staticmethod
    def ar1(phi: float, variance: float = 1.0) -> ArmaShiftProcess:
        return ArmaShiftProcess(phi=(phi,), innovation=InnovationSpec(variance=variance))

    @staticmethod
    def white(variance: float = 1.0) -> ArmaShiftProcess:
        return ArmaShiftProcess(innovation=InnovationSpec(variance=variance))


@dataclass(frozen=True)
class InnovationLaw:
    """Resolved innovation distribution and constant term of a stationary process."""

    shape: float
    scale: float
    cap: float | None  # upper truncation, negative-MA case only
    c: float
    mean: float
    variance: float  # effective variance after truncation

    @property
    def degenerate(self) -> bool:
        return self.scale == 0.0


def check_stationarity(proc: ArmaShiftProcess) -> bool:
    """True iff every root of 1 - sum(phi_i z^i) lies strictly outside the unit circle."""
    if proc.p == 0:
        return True
    arma = ArmaProcess.from_coeffs(np.asarray(proc.phi), np.asarray(proc.alpha))
    roots = np.atleast_1d(arma.arroots)
    if roots.size == 0:
        return True
    return bool(np.min(np.abs(roots)) > 1.0 + STATIONARITY_TOL)


def _require_stationary(proc: ArmaShiftProcess) -> None:
    if not check_stationarity(proc):
        raise NonStationaryProcessError(
            f"AR polynomial with phi={list(proc.phi)} has a root on or inside the unit circle"
        )


def _truncated_gamma_moments(shape: float, scale: float, cap: float) -> tuple[float, float, float]:
    """(P(X <= cap), E[X | X <= cap], Var[X | X <= cap]) for X ~ Gamma(shape, scale)."""
    mass = float(stats.gamma.cdf(cap, shape, scale=scale))
    if mass <= 0:
        return 0.0, 0.0, 0.0
    m1 = shape * scale * float(stats.gamma.cdf(cap, shape + 1, scale=scale)) / mass
    m2 = shape * (shape + 1) * scale**2 * float(stats.gamma.cdf(cap, shape + 2, scale=scale)) / mass
    return mass, m1, max(m2 - m1**2, 0.0)


def innovation_law(proc: ArmaShiftProcess) -> InnovationLaw:
    """Resolve gamma parameters and c so that the stationary mean is exactly 1."""
    _require_stationary(proc)
    sphi = float(sum(proc.phi))
    salpha = float(sum(proc.alpha))
    var = proc.innovation.variance
    if var == 0.0:
        return InnovationLaw(shape=1.0, scale=0.0, cap=None, c=1.0 - sphi, mean=0.0, variance=0.0)

    if not proc.negative_ma:
        k_max = ((1.0 - sphi) / (1.0 + salpha)) ** 2 / var
        shape = proc.innovation.shape if proc.innovation.shape is not None else k_max
        scale = math.sqrt(var / shape)
        mean = shape * scale
        c = (1.0 - sphi) - (1.0 + salpha) * mean
        if c < -1e-12:
            raise RiderValidationError(
                f"innovation shape {shape:g} is too large: constant term c={c:.4g} < 0 "
                f"(max shape {k_max:.4g})"
            )
        return InnovationLaw(shape, scale, None, max(c, 0.0), mean, var)

    phi1 = proc.phi[0]
    theta = -proc.alpha[0]
    if proc.innovation.shape is not None:
        shape = proc.innovation.shape
    else:
        shape = ((1.0 - phi1) / (2.0 * (1.0 - theta))) ** 2 / var
    scale = math.sqrt(var / shape)

    def mean_gap(c: float) -> float:
        _, m1, _ = _truncated_gamma_moments(shape, scale, c / theta)
        return c + (1.0 - theta) * m1 - (1.0 - phi1)

    hi = 1.0 - phi1
    lo = hi * 1e-12
    if mean_gap(lo) >= 0:
        raise RiderValidationError("cannot place the truncated innovation mean below the target")
    c = float(optimize.brentq(mean_gap, lo, hi, xtol=1e-15, rtol=1e-14))
    _, m1, v = _truncated_gamma_moments(shape, scale, c / theta)
    return InnovationLaw(shape, scale, c / theta, c, m1, v)


def autocov_vector(proc: ArmaShiftProcess, max_lag: int) -> np.ndarray:
    """Autocovariances rho(0..max_lag) of the stationary weight process."""
    if max_lag < 0:
        raise RiderValidationError("max_lag must be nonnegative")
    law = innovation_law(proc)
    if law.variance == 0.0:
        return np.zeros(max_lag + 1)
    ar = np.r_[1.0, -np.asarray(proc.phi, dtype=float)]
    ma = np.r_[1.0, np.asarray(proc.alpha, dtype=float)]
    return np.asarray(arma_acovf(ar, ma, nobs=max_lag + 1, sigma2=law.variance), dtype=float)


def theoretical_autocov(proc: ArmaShiftProcess, h: int) -> float:
    h = abs(int(h))
    return float(autocov_vector(proc, h)[h])


def _draw_innovations(
    law: InnovationLaw, size: tuple[int, ...], rng: np.random.Generator
) -> np.ndarray:
    if law.degenerate:
        return np.zeros(size)
    eps = rng.gamma(law.shape, law.scale, size=size)
    if law.cap is not None:
        # rejection resampling keeps draws i.i.d. from the truncated law
        bad = eps > law.cap
        while np.any(bad):
            eps[bad] = rng.gamma(law.shape, law.scale, size=int(bad.sum()))
            bad = eps > law.cap
    return eps


def _filter(proc: ArmaShiftProcess, law: InnovationLaw, eps: np.ndarray) -> np.ndarray:
    # W - 1 follows the zero-mean ARMA driven by eps - E[eps]; zero initial state is W = 1
    b = np.r_[1.0, np.asarray(proc.alpha, dtype=float)]
    a = np.r_[1.0, -np.asarray(proc.phi, dtype=float)]
    return 1.0 + signal.lfilter(b, a, eps - law.mean, axis=0)


def adaptive_burn_in(proc: ArmaShiftProcess, tol: float = 1e-12) -> int:
    """Steps until the initial condition has decayed below tol, capped at BURN_IN."""
    if proc.p == 0:
        return proc.q
    arma = ArmaProcess.from_coeffs(np.asarray(proc.phi), np.asarray(proc.alpha))
    roots = np.atleast_1d(arma.arroots)
    if roots.size == 0:
        return proc.q
    radius = float(np.max(1.0 / np.abs(roots)))
    if radius <= 0:
        return proc.q
    steps = math.ceil(math.log(tol) / math.log(radius)) + proc.q
    return int(min(max(steps, proc.q), BURN_IN))


def _clamp(values: np.ndarray) -> tuple[np.ndarray, int]:
    neg = values < 0
    count = int(neg.sum())
    if count:
        values = np.where(neg, 0.0, values)
    return values, count


def draw_field(
    proc: ArmaShiftProcess,
    T: int,
    m: int,
    rng: np.random.Generator,
    burn_in: int | None = None,
) -> np.ndarray:
    """T x m weights from a single generator; the fast path for Monte Carlo loops."""
    law = innovation_law(proc)
    if law.degenerate:
        return np.ones((T, m))
    b = adaptive_burn_in(proc) if burn_in is None else burn_in
    eps = _draw_innovations(law, (b + T, m), rng)
    values, _ = _clamp(_filter(proc, law, eps)[b:])
    return values


def _bin_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_BIN_STREAM, j)))


def _dataset_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_DATASET_STREAM, int(t) % (2**63)))
    )


def simulate_weight_field(proc: ArmaShiftProcess, T: int, m: int, seed: int) -> WeightField:
    """Independent per-bin ARMA paths, each with its own substream of `seed`."""
    if T < 1 or m < 1:
        raise RiderValidationError(f"T and m must be positive, got T={T}, m={m}")
    law = innovation_law(proc)
    requested = proc.innovation.variance
    if law.cap is not None and law.variance < TRUNCATED_VARIANCE_WARN * requested:
        log_event(
            event="innovation_variance_truncated",
            details={
                "requested_variance": requested,
                "effective_variance": law.variance,
                "cap": law.cap,
            },
            level=logging.WARNING,
        )
    if law.degenerate:
        field_ = WeightField(np.ones((T, m)))
        log_event(event="weight_field_simulated", details={"T": T, "m": m, "clamped": 0})
        return field_

    cols = []
    for j in range(m):
        eps = _draw_innovations(law, (BURN_IN + T,), _bin_rng(seed, j))
        cols.append(_filter(proc, law, eps)[BURN_IN:])
    values, clamped = _clamp(np.column_stack(cols))
    log_event(
        event="weight_field_simulated",
        details={"T": T, "m": m, "clamped": clamped},
        level=logging.WARNING if clamped else logging.INFO,
    )
    return WeightField(values, start_t=1, clamped=clamped)


QuantileTransform = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ParentDistribution:
    """The parent law written as D = h(U, A).

    U is the scalar uniform the tilt acts on; A holds `aux_dim` independent uniforms for
    coordinates the tilt leaves alone. `quantile_transform(u, aux)` returns (X, y).
    """

    quantile_transform: QuantileTransform
    sample_dim: int
    description: str
    aux_dim: int = 0

    def transform(
        self, u: np.ndarray, aux: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=float).reshape(-1)
        n = u.shape[0]
        a = np.full((n, self.aux_dim), 0.5) if aux is None else np.asarray(aux, dtype=float)
        x, y = self.quantile_transform(u, a.reshape(n, self.aux_dim))
        x = np.asarray(x, dtype=float).reshape(n, self.sample_dim)
        return x, np.asarray(y, dtype=float).reshape(-1)


def _open_unit(u: np.ndarray) -> np.ndarray:
    return np.clip(u, _U_EPS, 1.0 - _U_EPS)


def uniform_parent(d: int = 1) -> ParentDistribution:
    """Uniform[0,1]^d; the outcome mirrors the shifting coordinate."""
    if d < 1:
        raise RiderValidationError("d must be >= 1")

    def h(u: np.ndarray, aux: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.column_stack([u, aux[:, : d - 1]]) if d > 1 else u.reshape(-1, 1)
        return x, u.copy()

    return ParentDistribution(h, sample_dim=d, description=f"uniform[0,1]^{d}", aux_dim=d - 1)


def gaussian_parent(d: int = 1) -> ParentDistribution:
    if d < 1:
        raise RiderValidationError("d must be >= 1")

    def h(u: np.ndarray, aux: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = stats.norm.ppf(_open_unit(u))
        cols = [z] + [stats.norm.ppf(_open_unit(aux[:, i])) for i in range(d - 1)]
        return np.column_stack(cols), z

    return ParentDistribution(h, sample_dim=d, description=f"gaussian N(0, I_{d})", aux_dim=d - 1)


def linear_model_parent(
    theta0: Sequence[float],
    noise_sd: float = 1.0,
    shift_loading: float = 0.6,
    outcome_loading: float = 1.0,
) -> ParentDistribution:
    """Linear regression parent driven by a latent factor z = Phi^-1(U).

    X_i = a z + sqrt(1 - a^2) e_i and Y = X theta0 + b z + noise, so a tilt on U moves
    both the covariate means and the conditional mean of Y given X.
    """
    theta = np.asarray(theta0, dtype=float).reshape(-1)
    d = theta.shape[0]
    if d < 1:
        raise RiderValidationError("theta0 must have at least one entry")
    if not (0.0 <= shift_loading <= 1.0):
        raise RiderValidationError("shift_loading must lie in [0, 1]")
    if noise_sd < 0:
        raise RiderValidationError("noise_sd must be nonnegative")
    a = float(shift_loading)
    resid = math.sqrt(1.0 - a * a)

    def h(u: np.ndarray, aux: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = stats.norm.ppf(_open_unit(u))
        e = stats.norm.ppf(_open_unit(aux))
        x = a * z[:, None] + resid * e[:, :d]
        y = x @ theta + outcome_loading * z + noise_sd * e[:, d]
        return x, y

    return ParentDistribution(
        h,
        sample_dim=d,
        description=f"linear model d={d} loading={a:g} outcome_loading={outcome_loading:g}",
        aux_dim=d + 1,
    )


def draw_tilted_uniforms(weights_row: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights_row, dtype=float).reshape(-1)
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise RiderValidationError("weights row must be a nonempty vector of nonnegative reals")
    total = w.sum()
    if total <= 0:
        raise RiderValidationError("weights row is all zero: the tilted distribution is degenerate")
    m = w.shape[0]
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    # side="right" so a zero-weight bin can never be selected
    j = np.searchsorted(cdf, rng.random(n), side="right")
    j = np.minimum(j, m - 1)
    u = (j + rng.random(n)) / m
    return np.clip(u, 0.0, 1.0)


def sample_perturbed_dataset(
    parent: ParentDistribution,
    weights_row: np.ndarray,
    n: int,
    t: int,
    seed: int,
) -> TimedDataset:
    if n < 1:
        raise RiderValidationError(f"n must be positive, got {n}")
    rng = _dataset_rng(seed, t)
    u = draw_tilted_uniforms(weights_row, n, rng)
    aux = rng.random((n, parent.aux_dim))
    x, y = parent.transform(u, aux)
    return TimedDataset(t=int(t), features=x, outcomes=y)


def simulate_panel(
    parent: ParentDistribution,
    proc: ArmaShiftProcess,
    T: int,
    m: int,
    sample_sizes: Sequence[int] | int,
    seed: int,
) -> tuple[Panel, WeightField]:
    if isinstance(sample_sizes, int):
        sizes = [int(sample_sizes)] * T
    else:
        sizes = [int(s) for s in sample_sizes]
    if len(sizes) != T:
        raise RiderValidationError(f"expected {T} sample sizes, got {len(sizes)}")
    wf = simulate_weight_field(proc, T, m, seed)
    datasets = [
        sample_perturbed_dataset(parent, wf.row(t), sizes[t - 1], t, seed) for t in range(1, T + 1)
    ]
    return Panel(datasets), wf


def bin_means(
    parent: ParentDistribution,
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    m: int,
    *,
    nodes: int = 16,
    aux_samples: int = 256,
    seed: int = 0,
) -> np.ndarray:
    """m * integral over bin I_j of E[fn(h(u, A))] du, for j = 1..m.

    The u-integral uses Gauss-Legendre quadrature per bin; auxiliary coordinates, when the
    parent has any, are averaged over a fixed set of uniform draws.
    """
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    left = np.arange(m) / m
    u = (left[:, None] + (gx[None, :] + 1.0) / (2.0 * m)).reshape(-1)
    w = np.tile(gw / 2.0, m)
    if parent.aux_dim == 0:
        x, y = parent.transform(u, np.zeros((u.shape[0], 0)))
        vals = np.asarray(fn(x, y), dtype=float)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_AUX_STREAM,)))
        aux = rng.random((aux_samples, parent.aux_dim))
        uu = np.repeat(u, aux_samples)
        aa = np.tile(aux, (u.shape[0], 1))
        x, y = parent.transform(uu, aa)
        vals = np.asarray(fn(x, y), dtype=float).reshape(u.shape[0], aux_samples).mean(axis=1)
    return (vals * w).reshape(m, nodes).sum(axis=1)


def tilted_mean(weights_row: np.ndarray, means: np.ndarray) -> float:
    """Exact E^t[phi] for a fixed row of bin weights."""
    w = np.asarray(weights_row, dtype=float)
    total = w.sum()
    if total <= 0:
        raise RiderValidationError("weights row is all zero")
    return float(w @ np.asarray(means, dtype=float) / total)


def process_from_config(cfg: ProcessConfig) -> ArmaShiftProcess:
    inn = cfg.innovation
    return ArmaShiftProcess(
        phi=tuple(cfg.phi),
        alpha=tuple(cfg.alpha),
        innovation=InnovationSpec(variance=inn.variance, shape=inn.shape),
    )


def parent_from_config(cfg: ParentConfig) -> ParentDistribution:
    if cfg.kind == "uniform":
        return uniform_parent(cfg.d)
    if cfg.kind == "gaussian":
        return gaussian_parent(cfg.d)
    theta0 = cfg.theta0 if cfg.theta0 is not None else [1.0] * cfg.d
    return linear_model_parent(theta0, cfg.noise_sd, cfg.shift_loading, cfg.outcome_loading)
