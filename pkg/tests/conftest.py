import os
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest


def _ensure_src_on_path() -> None:
    repo_root = Path(__file__).resolve().parent.parent
    src = repo_root / "src"
    if src.exists():
        sys.path.insert(0, str(src))


_ensure_src_on_path()

from rider.rider_types import Panel, TimedDataset  # noqa: E402
from rider.shift_sim import ArmaShiftProcess, linear_model_parent, simulate_panel  # noqa: E402


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    # env overrides must not leak in from the developer's shell
    for key in list(os.environ):
        if key.startswith("RIDER_"):
            monkeypatch.delenv(key, raising=False)


def make_panel(
    T: int, n: int = 5, d: int = 1, seed: int = 0, start: int = 1, noise: float = 1.0
) -> Panel:
    """Small random linear-regression panel with a drifting intercept."""
    rng = np.random.default_rng(seed)
    datasets = []
    for i in range(T):
        x = rng.normal(size=(n, d))
        y = x.sum(axis=1) + 0.1 * i + noise * rng.normal(size=n)
        datasets.append(TimedDataset(t=start + i, features=x, outcomes=y))
    return Panel(datasets)


@pytest.fixture()
def small_panel() -> Panel:
    return make_panel(T=30, n=40, d=2, seed=3)


@pytest.fixture()
def shifted_panel() -> Panel:
    panel, _ = simulate_panel(
        linear_model_parent([1.0, -0.5], noise_sd=0.5, shift_loading=0.8, outcome_loading=2.0),
        ArmaShiftProcess.ar1(0.8),
        T=40,
        m=20,
        sample_sizes=100,
        seed=11,
    )
    return panel


@pytest.fixture()
def panel_factory() -> Callable[..., Panel]:
    return make_panel
