from __future__ import annotations

import logging

import numpy as np
import pytest

from rider.config import ParentConfig, ProcessConfig
from rider.errors import NonStationaryProcessError, RiderValidationError
from rider.shift_sim import (
    ArmaShiftProcess,
    InnovationSpec,
    adaptive_burn_in,
    autocov_vector,
    bin_means,
    check_stationarity,
    draw_tilted_uniforms,
    gaussian_parent,
    innovation_law,
    linear_model_parent,
    parent_from_config,
    process_from_config,
    simulate_panel,
    simulate_weight_field,
    theoretical_autocov,
    tilted_mean,
    uniform_parent,
)


def test_ar1_autocovariance_matches_closed_form() -> None:
    proc = ArmaShiftProcess.ar1(0.5)
    rho = autocov_vector(proc, 3)
    np.testing.assert_allclose(rho, [4 / 3, 2 / 3, 1 / 3, 1 / 6], rtol=1e-10)
    assert theoretical_autocov(proc, -2) == pytest.approx(1 / 3)


def test_arma11_autocovariance_matches_closed_form() -> None:
    proc = ArmaShiftProcess(phi=(0.5,), alpha=(0.3,))
    rho = autocov_vector(proc, 1)
    assert rho[0] == pytest.approx(1.39 / 0.75, rel=1e-10)
    assert rho[1] == pytest.approx(1.15 * 0.8 / 0.75, rel=1e-10)


@pytest.mark.parametrize(
    "phi,ok",
    [((0.5,), True), ((0.3, 0.4), True), ((1.0,), False), ((0.6, 0.5), False)],
)
def test_stationarity_check(phi: tuple[float, ...], ok: bool) -> None:
    proc = ArmaShiftProcess(phi=phi)
    assert check_stationarity(proc) is ok
    if not ok:
        with pytest.raises(NonStationaryProcessError):
            innovation_law(proc)


def test_rejects_negative_coefficients_outside_arma11() -> None:
    with pytest.raises(RiderValidationError):
        ArmaShiftProcess(phi=(-0.2,))
    with pytest.raises(RiderValidationError):
        ArmaShiftProcess(phi=(0.5,), alpha=(-0.2, 0.1))
    with pytest.raises(RiderValidationError):
        ArmaShiftProcess(phi=(0.5,), alpha=(-1.2,))


def test_constant_term_gives_unit_stationary_mean() -> None:
    proc = ArmaShiftProcess(phi=(0.4, 0.2), alpha=(0.5,), innovation=InnovationSpec(0.5, 0.05))
    law = innovation_law(proc)
    assert law.c + (1 + 0.5) * law.mean == pytest.approx(1 - 0.6, abs=1e-12)
    assert law.c >= 0


def test_default_shape_puts_constant_at_zero() -> None:
    law = innovation_law(ArmaShiftProcess.white(1.0))
    assert law.c == pytest.approx(0.0, abs=1e-12)
    assert law.mean == pytest.approx(1.0)


def test_shape_too_large_is_rejected() -> None:
    proc = ArmaShiftProcess(phi=(0.5,), innovation=InnovationSpec(variance=1.0, shape=1.0))
    with pytest.raises(RiderValidationError, match="too large"):
        innovation_law(proc)


def test_negative_ma_truncation_keeps_mean_and_nonnegativity() -> None:
    proc = ArmaShiftProcess(phi=(0.8,), alpha=(-0.4,))
    law = innovation_law(proc)
    assert law.cap is not None and law.c > 0
    assert law.c + (1 - 0.4) * law.mean == pytest.approx(0.2, abs=1e-10)
    field = simulate_weight_field(proc, T=300, m=20, seed=5)
    assert field.clamped == 0
    assert np.all(field.values >= 0)


def test_truncation_logs_effective_variance(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.WARNING, logger="rider")
    proc = ArmaShiftProcess(phi=(0.8,), alpha=(-0.4,))
    simulate_weight_field(proc, T=5, m=2, seed=0)
    events = [
        r.msg
        for r in caplog.records
        if isinstance(r.msg, dict) and r.msg.get("event") == "innovation_variance_truncated"
    ]
    assert len(events) == 1
    assert events[0]["requested_variance"] == 1.0
    assert events[0]["effective_variance"] == pytest.approx(innovation_law(proc).variance)
    assert events[0]["effective_variance"] < 0.5
    caplog.clear()
    simulate_weight_field(ArmaShiftProcess.ar1(0.8), T=5, m=2, seed=0)
    assert not any(
        isinstance(r.msg, dict) and r.msg.get("event") == "innovation_variance_truncated"
        for r in caplog.records
    )


def test_degenerate_process_is_all_ones() -> None:
    field = simulate_weight_field(ArmaShiftProcess.white(0.0), T=4, m=3, seed=0)
    np.testing.assert_array_equal(field.values, np.ones((4, 3)))
    np.testing.assert_array_equal(autocov_vector(ArmaShiftProcess.white(0.0), 2), np.zeros(3))


def test_simulated_field_has_unit_mean_and_ar1_correlation() -> None:
    field = simulate_weight_field(ArmaShiftProcess.ar1(0.5), T=2000, m=50, seed=0)
    v = field.values
    assert field.clamped == 0
    assert v.mean() == pytest.approx(1.0, abs=0.05)
    centered = v - v.mean(axis=0)
    lag1 = (centered[1:] * centered[:-1]).sum() / (centered**2).sum()
    assert lag1 == pytest.approx(0.5, abs=0.05)


def test_weight_field_logs_event(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.INFO, logger="rider")
    simulate_weight_field(ArmaShiftProcess.white(1.0), T=5, m=4, seed=1)
    events = [r.msg for r in caplog.records if isinstance(r.msg, dict)]
    assert any(e.get("event") == "weight_field_simulated" and e.get("T") == 5 for e in events)


def test_burn_in_follows_root_radius() -> None:
    assert adaptive_burn_in(ArmaShiftProcess.white(1.0)) == 0
    assert adaptive_burn_in(ArmaShiftProcess.ar1(0.5)) == 40
    assert adaptive_burn_in(ArmaShiftProcess.ar1(0.999)) == 1000


def test_zero_weight_bins_are_never_drawn() -> None:
    rng = np.random.default_rng(0)
    u = draw_tilted_uniforms(np.array([0.0, 1.0, 0.0, 1.0]), 2000, rng)
    bins = np.floor(u * 4).astype(int)
    assert set(bins.tolist()) <= {1, 3}


def test_tilt_moves_mass_in_proportion() -> None:
    rng = np.random.default_rng(1)
    u = draw_tilted_uniforms(np.array([3.0, 1.0]), 20_000, rng)
    assert np.mean(u < 0.5) == pytest.approx(0.75, abs=0.02)


def test_all_zero_row_is_rejected() -> None:
    with pytest.raises(RiderValidationError):
        draw_tilted_uniforms(np.zeros(3), 5, np.random.default_rng(0))


def test_simulate_panel_is_deterministic_per_seed() -> None:
    parent = linear_model_parent([1.0, 2.0])
    proc = ArmaShiftProcess.ar1(0.5)
    p1, f1 = simulate_panel(parent, proc, T=6, m=10, sample_sizes=7, seed=3)
    p2, f2 = simulate_panel(parent, proc, T=6, m=10, sample_sizes=7, seed=3)
    p3, _ = simulate_panel(parent, proc, T=6, m=10, sample_sizes=7, seed=4)
    assert p1.times == [1, 2, 3, 4, 5, 6]
    assert p1.d == 2 and p1[0].n == 7
    np.testing.assert_array_equal(f1.values, f2.values)
    for a, b in zip(p1, p2, strict=True):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.outcomes, b.outcomes)
    assert not np.array_equal(p1[0].outcomes, p3[0].outcomes)


def test_simulate_panel_per_period_sizes() -> None:
    panel, _ = simulate_panel(uniform_parent(1), ArmaShiftProcess.white(1.0), 3, 5, [2, 4, 6], 0)
    assert panel.sample_sizes.tolist() == [2, 4, 6]
    with pytest.raises(RiderValidationError):
        simulate_panel(uniform_parent(1), ArmaShiftProcess.white(1.0), 3, 5, [2, 4], 0)


def test_bin_means_are_exact_for_polynomials() -> None:
    means = bin_means(uniform_parent(1), lambda x, y: x[:, 0], 4)
    np.testing.assert_allclose(means, [0.125, 0.375, 0.625, 0.875], atol=1e-14)
    assert tilted_mean(np.ones(4), means) == pytest.approx(0.5)
    assert tilted_mean(np.array([1.0, 0.0, 0.0, 1.0]), means) == pytest.approx(0.5)
    assert tilted_mean(np.array([1.0, 0.0, 0.0, 0.0]), means) == pytest.approx(0.125)


def test_parent_transforms_have_expected_shapes() -> None:
    u = np.array([0.25, 0.5, 0.75])
    x, y = gaussian_parent(3).transform(u)
    assert x.shape == (3, 3) and y.shape == (3,)
    assert x[1, 0] == pytest.approx(0.0, abs=1e-12)
    x, y = linear_model_parent([1.0, -1.0], noise_sd=0.0).transform(u)
    assert x.shape == (3, 2)
    # aux defaults to 0.5, so the idiosyncratic parts vanish
    np.testing.assert_allclose(y, x @ np.array([1.0, -1.0]) + x[:, 0] / 0.6, atol=1e-12)


def test_builders_from_config() -> None:
    proc = process_from_config(ProcessConfig(phi=[0.3], alpha=[0.2]))
    assert proc.phi == (0.3,) and proc.alpha == (0.2,)
    parent = parent_from_config(ParentConfig(kind="linear", d=3))
    assert parent.sample_dim == 3 and parent.aux_dim == 4
    assert parent_from_config(ParentConfig(kind="uniform", d=2)).aux_dim == 1
