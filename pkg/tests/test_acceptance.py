"""End-to-end Monte-Carlo checks; these take minutes. Run with `pytest -m slow`."""

from __future__ import annotations

import pytest

from rider.backtest import run_backtest
from rider.config import BacktestConfig, MethodSpec, VerifyConfig
from rider.shift_sim import ArmaShiftProcess, linear_model_parent, simulate_panel
from rider.verify import (
    check_arma11_oracles,
    check_clt,
    check_consistency,
    check_recovery,
    run_checks,
)

pytestmark = pytest.mark.slow


def test_arma11_closed_form_is_the_large_window_limit() -> None:
    results = check_arma11_oracles()
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_clt_inflation_factor_matches_formula() -> None:
    results = check_clt(VerifyConfig(), seed=0)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_nonparametric_weights_recover_ar1_optimum() -> None:
    res = check_recovery(VerifyConfig(recovery_seeds=10), seed=0)
    assert res.passed, res.line()


def test_default_verify_run_passes() -> None:
    failed = [r.line() for r in run_checks(seed=1) if not r.passed]
    assert not failed, failed


def test_backtest_beats_pooling_under_strong_shift() -> None:
    panel, _ = simulate_panel(
        linear_model_parent([1.0, -0.5], noise_sd=0.5, shift_loading=0.8, outcome_loading=2.0),
        ArmaShiftProcess.ar1(0.8),
        T=150,
        m=4,
        sample_sizes=200,
        seed=5,
    )
    cfg = BacktestConfig(K=10, baselines=[MethodSpec(name="pooling")], target_start=40)
    report = run_backtest(panel, cfg)
    (cmp,) = report.comparisons
    assert len(cmp.targets) >= 100
    assert report.aggregate() < report.aggregate("pooling")
    assert cmp.t_stat < 0
    assert cmp.p_value < 0.01


def test_no_shift_backtest_does_not_reject_pooling() -> None:
    parent = linear_model_parent(
        [1.0, -0.5], noise_sd=0.5, shift_loading=0.8, outcome_loading=2.0
    )
    cfg = BacktestConfig(K=10, baselines=[MethodSpec(name="pooling")], target_start=40)
    p_values = []
    for seed in range(100, 120):
        panel, _ = simulate_panel(
            parent, ArmaShiftProcess.white(0.0), T=150, m=4, sample_sizes=200, seed=seed
        )
        (cmp,) = run_backtest(panel, cfg).comparisons
        p_values.append(cmp.p_value)
    assert sum(p > 0.05 for p in p_values) >= 16, p_values


def test_estimation_gap_shrinks_with_more_data() -> None:
    results = check_consistency(VerifyConfig(consistency_reps=30), seed=0)
    assert len(results) == 4
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
