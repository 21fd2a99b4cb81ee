from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import RiderValidationError

SIMPLEX_SUM_TOL = 1e-9
NONNEG_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimedDataset:
    """Samples (X, Y) collected at one time index."""

    t: int
    features: np.ndarray  # shape (n_t, d)
    outcomes: np.ndarray  # shape (n_t,)
    # original grouping key (e.g. an ISO week) when the panel was re-indexed
    label: str | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.outcomes, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise RiderValidationError(f"features for t={self.t} must be a 2-D matrix")
        if x.shape[0] != y.shape[0]:
            raise RiderValidationError(
                f"t={self.t}: {x.shape[0]} feature rows but {y.shape[0]} outcomes"
            )
        if y.shape[0] < 1:
            raise RiderValidationError(f"dataset t={self.t} is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise RiderValidationError(f"dataset t={self.t} contains non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "outcomes", y)

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def with_data(self, features: np.ndarray, outcomes: np.ndarray) -> TimedDataset:
        return TimedDataset(t=self.t, features=features, outcomes=outcomes, label=self.label)


@dataclass(frozen=True, eq=False)
class Panel:
    """Ordered sequence of datasets with consecutive time indices."""

    datasets: tuple[TimedDataset, ...]

    def __init__(self, datasets: Sequence[TimedDataset]) -> None:
        ds = tuple(datasets)
        if not ds:
            raise RiderValidationError("a panel needs at least one dataset")
        for prev, cur in zip(ds, ds[1:], strict=False):
            if cur.t != prev.t + 1:
                raise RiderValidationError(
                    f"time indices must be consecutive: {prev.t} followed by {cur.t}"
                )
        dims = {d.d for d in ds}
        if len(dims) != 1:
            raise RiderValidationError(f"datasets disagree on feature dimension: {sorted(dims)}")
        object.__setattr__(self, "datasets", ds)

    def __len__(self) -> int:
        return len(self.datasets)

    def __iter__(self) -> Iterator[TimedDataset]:
        return iter(self.datasets)

    def __getitem__(self, idx: int) -> TimedDataset:
        return self.datasets[idx]

    @property
    def d(self) -> int:
        return self.datasets[0].d

    @property
    def times(self) -> list[int]:
        return [ds.t for ds in self.datasets]

    @property
    def sample_sizes(self) -> np.ndarray:
        return np.array([ds.n for ds in self.datasets], dtype=int)

    def index_of(self, t: int) -> int:
        pos = t - self.datasets[0].t
        if pos < 0 or pos >= len(self.datasets):
            raise RiderValidationError(
                f"time index {t} not in panel {self.times[0]}..{self.times[-1]}"
            )
        return pos

    def window(self, t: int, K: int) -> list[TimedDataset]:
        """The K datasets strictly before time t, in chronological order."""
        pos = self.index_of(t)
        if pos < K:
            raise RiderValidationError(f"t={t} has only {pos} prior datasets, need K={K}")
        return list(self.datasets[pos - K : pos])

    def before(self, t: int) -> Panel:
        pos = self.index_of(t)
        if pos == 0:
            raise RiderValidationError(f"no data before t={t}")
        return Panel(self.datasets[:pos])

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.vstack([ds.features for ds in self.datasets])
        y = np.concatenate([ds.outcomes for ds in self.datasets])
        return x, y


@dataclass(frozen=True, eq=False)
class WeightVector:
    """A simplex vector beta over a K-window; beta[k-1] weighs the dataset k steps back."""

    beta: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        b = np.asarray(self.beta, dtype=float).reshape(-1)
        if b.size < 1:
            raise RiderValidationError("weight vector must have K >= 1 entries")
        if not np.all(np.isfinite(b)):
            raise RiderValidationError("weight vector contains non-finite entries")
        if np.any(b < -NONNEG_TOL):
            raise RiderValidationError(f"weights must be nonnegative, min entry {b.min():.3e}")
        b = np.clip(b, 0.0, None)
        if abs(b.sum() - 1.0) > SIMPLEX_SUM_TOL:
            raise RiderValidationError(f"weights must sum to 1, got {b.sum():.12f}")
        object.__setattr__(self, "beta", b)

    @property
    def K(self) -> int:
        return int(self.beta.shape[0])

    @staticmethod
    def uniform(K: int, **meta: Any) -> WeightVector:
        return WeightVector(np.full(K, 1.0 / K), meta=dict(meta))

    @staticmethod
    def normalized(raw: np.ndarray, **meta: Any) -> WeightVector:
        r = np.clip(np.asarray(raw, dtype=float), 0.0, None)
        total = r.sum()
        if total <= 0:
            raise RiderValidationError("cannot normalize an all-zero weight vector")
        return WeightVector(r / total, meta=dict(meta))


@dataclass(frozen=True, eq=False)
class WeightField:
    """Latent bin weights W_j^t, one row per time step."""

    values: np.ndarray  # shape (T, m)
    start_t: int = 1
    clamped: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise RiderValidationError("weight field must be a T x m matrix")
        if np.any(v < 0):
            raise RiderValidationError("weight field entries must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return int(self.values.shape[0])

    @property
    def m(self) -> int:
        return int(self.values.shape[1])

    def row(self, t: int) -> np.ndarray:
        return self.values[t - self.start_t]


@dataclass(frozen=True, eq=False)
class SigmaW:
    """K x K covariance of the lag residuals W^{t-i} - W^t, built from an autocovariance."""

    matrix: np.ndarray
    rho: np.ndarray  # autocovariances at lags 0..K

    @property
    def K(self) -> int:
        return int(self.matrix.shape[0])


def ratio_vector(ratios: float | Sequence[float] | np.ndarray, K: int) -> np.ndarray:
    """Broadcast a scalar ratio r = m/n, or validate a per-lag vector (r_{t-1}, ..., r_{t-K})."""
    r = np.asarray(ratios, dtype=float)
    if r.ndim == 0:
        r = np.full(K, float(r))
    r = r.reshape(-1)
    if r.shape[0] != K:
        raise RiderValidationError(f"ratio vector has {r.shape[0]} entries, expected K={K}")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise RiderValidationError("ratios must be finite and nonnegative")
    return r
