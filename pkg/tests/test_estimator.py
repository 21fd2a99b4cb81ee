from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from rider.config import (
    CvScheme,
    EstimationConfig,
    ParametricGrid,
    TestFunctionConfig,
    WermProblem,
)
from rider.errors import (
    DegenerateTestFunctionError,
    InsufficientHistoryError,
    RiderValidationError,
)
from rider.estimator import (
    MomentMatrix,
    QuantileBins,
    TestFunctionSpec,
    build_moments,
    clip_datasets,
    cv_targets,
    default_test_functions,
    estimate_weights_nonparametric,
    estimate_weights_parametric_cv,
    evaluate_test_functions,
    forward_chain_losses,
    nonparametric_objective,
    parametric_candidates,
    pooled_covariance,
    pooled_samples,
    select_half_life_cv,
    spec_from_config,
    specs_from_config,
    whiten_test_functions,
    whitening_matrix,
)
from rider.rider_types import Panel, TimedDataset, WeightVector
from rider.weights import exponential_reference_weights


def _moments(values: np.ndarray) -> MomentMatrix:
    T, L = values.shape
    return MomentMatrix(
        values=values,
        valid=np.ones((T, L), dtype=bool),
        cell_counts=np.ones((T, L), dtype=int),
        times=np.arange(1, T + 1),
        labels=tuple(f"m{j}" for j in range(L)),
    )


def test_test_function_values() -> None:
    x = np.array([[0.1, 5.0], [0.6, 6.0], [0.9, 7.0]])
    y = np.array([1.0, 2.0, 4.0])
    vals, _ = TestFunctionSpec("covariate", index=1).values(x, y)
    np.testing.assert_array_equal(vals, [5.0, 6.0, 7.0])
    vals, _ = TestFunctionSpec("outcome").values(x, y)
    np.testing.assert_array_equal(vals, y)
    vals, _ = TestFunctionSpec("indicator", index=0, low=0.5, high=1.0).values(x, y)
    np.testing.assert_array_equal(vals, [0.0, 1.0, 1.0])
    scaled = TestFunctionSpec("outcome").affine(2.0, 1.0)
    np.testing.assert_array_equal(scaled.values(x, y)[0], [3.0, 5.0, 9.0])
    with pytest.raises(RiderValidationError):
        TestFunctionSpec("covariate")
    assert [s.label for s in default_test_functions(2)] == ["x1", "x2", "y"]


def test_conditional_test_function_from_config() -> None:
    cfg = TestFunctionConfig(
        kind="conditional", event_index=0, low=0.5, numerator="ratio", numerator_index=1
    )
    spec = spec_from_config(cfg)
    x = np.array([[0.1, 5.0], [0.6, 6.0], [0.9, 7.0]])
    y = np.array([1.0, 2.0, 0.0])
    vals, mask = spec.values(x, y)
    # the last sample divides by zero and drops out of the event
    assert mask.tolist() == [False, True, False]
    assert vals[1] == pytest.approx(3.0)
    with pytest.raises(RiderValidationError):
        specs_from_config([cfg], d=1)


def test_conditional_cells_below_min_count_are_invalid(
    panel_factory: Callable[..., Panel],
) -> None:
    panel = panel_factory(T=4, n=5, d=1, seed=0)
    cfg = TestFunctionConfig(kind="conditional", event_index=0, low=-10.0, min_count=3)
    mm = evaluate_test_functions(panel, [spec_from_config(cfg), TestFunctionSpec("outcome")])
    assert mm.valid.all()
    never = TestFunctionConfig(kind="conditional", event_index=0, low=100.0, min_count=1)
    with pytest.raises(DegenerateTestFunctionError):
        evaluate_test_functions(panel, [spec_from_config(never)])


def test_standardize_divides_by_pooled_sd(small_panel: Panel) -> None:
    specs = default_test_functions(2)
    raw = evaluate_test_functions(small_panel, specs)
    std = build_moments(small_panel, specs, EstimationConfig(K=3))
    sd = np.std(pooled_samples(small_panel, specs[2]), ddof=1)
    np.testing.assert_allclose(std.values[:, 2], raw.values[:, 2] / sd)
    assert std.meta["standardized"] is True
    flat = Panel(
        [TimedDataset(t=t, features=np.ones((3, 1)), outcomes=np.zeros(3)) for t in (1, 2)]
    )
    with pytest.raises(DegenerateTestFunctionError):
        build_moments(flat, [TestFunctionSpec("outcome")], EstimationConfig(K=1))


def test_whitening_gives_identity_covariance(small_panel: Panel) -> None:
    specs = default_test_functions(2)
    cov = pooled_covariance(small_panel, specs)
    samples = np.column_stack([pooled_samples(small_panel, s) for s in specs])
    np.testing.assert_allclose(cov, np.cov(samples, rowvar=False), atol=1e-10)
    whitener = whiten_test_functions(small_panel, specs)
    white = whitener.transform_samples(samples)
    np.testing.assert_allclose(np.cov(white, rowvar=False), np.eye(3), atol=1e-8)
    mm = build_moments(small_panel, specs, EstimationConfig(K=3, whiten=True))
    assert mm.labels == ("w1", "w2", "w3")


def test_quantile_bins_cover_every_variable(small_panel: Panel) -> None:
    family = QuantileBins.fit(small_panel, bins=5, min_count=10)
    # five bins per variable, the last one left out
    assert family.L == 3 * 4
    assert family.labels[0].startswith("1[-inf<=x1<")
    assert "<=y<" in family.labels[-1]
    ds = small_panel[0]
    ind = family.indicators(ds.features, ds.outcomes)
    assert ind.shape == (40, 12)
    assert np.all(ind.reshape(40, 3, 4).sum(axis=2) <= 1)


def test_default_moments_are_whitened_quantile_bins(small_panel: Panel) -> None:
    assert specs_from_config([], d=2) == []
    mm = build_moments(small_panel, [], EstimationConfig(K=3, bins=5))
    assert mm.labels == tuple(f"w{j}" for j in range(1, 13))
    assert mm.meta["family"] == "quantile_bins"
    family = QuantileBins.fit(small_panel, bins=5, min_count=10)
    samples = np.vstack([family.indicators(ds.features, ds.outcomes) for ds in small_panel])
    white = samples @ whitening_matrix(samples).T
    np.testing.assert_allclose(np.cov(white, rowvar=False), np.eye(12), atol=1e-8)
    np.testing.assert_allclose(mm.values[0], white[:40].mean(axis=0), atol=1e-10)
    tiny = Panel(list(small_panel)[:1])
    with pytest.raises(DegenerateTestFunctionError):
        build_moments(tiny, [], EstimationConfig(K=1, min_count=50))


def test_nonparametric_recovers_exact_recursion() -> None:
    rng = np.random.default_rng(0)
    values = np.zeros((8, 6))
    values[:2] = rng.normal(size=(2, 6))
    for t in range(2, 8):
        values[t] = 0.7 * values[t - 1] + 0.3 * values[t - 2]
    est = estimate_weights_nonparametric(_moments(values), EstimationConfig(K=2))
    np.testing.assert_allclose(est.beta, [0.7, 0.3], atol=1e-6)
    assert est.meta["objective"] == pytest.approx(0.0, abs=1e-10)


def test_nonparametric_objective_matches_reported_value() -> None:
    values = np.random.default_rng(1).normal(size=(20, 3))
    mm = _moments(values)
    est = estimate_weights_nonparametric(mm, EstimationConfig(K=4))
    direct = nonparametric_objective(mm, est.beta, 4, range(4, 20))
    assert est.meta["objective"] == pytest.approx(direct, rel=1e-8)
    assert est.meta["n_terms"] == 16 * 3
    uniform = nonparametric_objective(mm, np.full(4, 0.25), 4, range(4, 20))
    assert direct <= uniform + 1e-12


def test_single_lag_is_forced_to_one() -> None:
    values = np.random.default_rng(2).normal(size=(6, 2))
    est = estimate_weights_nonparametric(_moments(values), EstimationConfig(K=1))
    np.testing.assert_array_equal(est.beta, [1.0])


def test_invalid_cells_are_skipped() -> None:
    values = np.random.default_rng(3).normal(size=(10, 2))
    mm = _moments(values)
    valid = mm.valid.copy()
    valid[5, 0] = False
    est = estimate_weights_nonparametric(mm.with_values(values, valid), EstimationConfig(K=2))
    # the invalid cell drops itself as a target and the two rows that use it as a lag
    assert est.meta["n_terms"] == 8 * 2 - 3


def test_target_selection() -> None:
    mm = _moments(np.random.default_rng(4).normal(size=(12, 2)))
    with pytest.raises(InsufficientHistoryError):
        estimate_weights_nonparametric(mm, EstimationConfig(K=12))
    half = estimate_weights_nonparametric(mm, EstimationConfig(K=4, fit_window="half_window"))
    assert half.meta["n_targets"] == 2
    picked = estimate_weights_nonparametric(mm, EstimationConfig(K=4), targets=[10, 12])
    assert picked.meta["n_targets"] == 2
    with pytest.raises(InsufficientHistoryError):
        estimate_weights_nonparametric(mm, EstimationConfig(K=4), targets=[3])


def test_nonparametric_honors_constraints(shifted_panel: Panel) -> None:
    specs = default_test_functions(2)
    cfg = EstimationConfig(K=6, constraints={"monotone": True, "cap": 0.4})
    est = estimate_weights_nonparametric(build_moments(shifted_panel, specs, cfg), cfg)
    assert est.beta[0] <= 0.4 + 1e-9
    assert np.all(np.diff(est.beta) <= 1e-9)


def test_clip_datasets_uses_window_percentiles() -> None:
    window = [
        TimedDataset(t=1, features=np.arange(10.0), outcomes=np.arange(10.0)),
        TimedDataset(t=2, features=np.arange(10.0, 20.0), outcomes=np.arange(10.0, 20.0)),
    ]
    test = TimedDataset(t=3, features=[100.0, -5.0], outcomes=[0.0, 50.0])
    clipped, (clipped_test,) = clip_datasets(window, (5.0, 95.0), [test])
    lo, hi = np.percentile(np.arange(20.0), [5.0, 95.0])
    assert clipped[0].features.min() == pytest.approx(lo)
    assert clipped[1].outcomes.max() == pytest.approx(hi)
    np.testing.assert_allclose(clipped_test.features[:, 0], [hi, lo])


def test_clipping_changes_estimated_weights() -> None:
    # one feature level per dataset; a 70th-percentile cap turns the 5s into 1s
    levels = [0.0, 5.0, 0.0, 1.0, 0.0, 5.0, 0.0, 1.0, 0.0]
    panel = Panel(
        [
            TimedDataset(t=i + 1, features=np.full((10, 1), v), outcomes=np.zeros(10))
            for i, v in enumerate(levels)
        ]
    )
    specs = [TestFunctionSpec("covariate", index=0)]
    raw_cfg = EstimationConfig(K=2, standardize=False)
    clip_cfg = EstimationConfig(K=2, standardize=False, clip_percentiles=(0.0, 70.0))
    raw = estimate_weights_nonparametric(build_moments(panel, specs, raw_cfg), raw_cfg)
    clipped = estimate_weights_nonparametric(build_moments(panel, specs, clip_cfg), clip_cfg)
    assert raw.beta[0] == pytest.approx(36 / 103, abs=1e-5)
    np.testing.assert_allclose(clipped.beta, [0.0, 1.0], atol=1e-6)


def test_estimation_min_count_is_a_floor(panel_factory: Callable[..., Panel]) -> None:
    panel = panel_factory(T=4, n=5, d=1, seed=0)
    cfg = TestFunctionConfig(kind="conditional", event_index=0, low=-10.0, min_count=3)
    spec = spec_from_config(cfg)
    ok = build_moments(panel, [spec], EstimationConfig(K=1, standardize=False, min_count=5))
    assert ok.valid.all()
    with pytest.raises(DegenerateTestFunctionError, match="fewer than 6"):
        build_moments(panel, [spec], EstimationConfig(K=1, standardize=False, min_count=6))


def test_cv_targets_use_tail_with_full_history(small_panel: Panel) -> None:
    assert cv_targets(small_panel, 10, 0.25) == list(range(23, 31))
    assert cv_targets(small_panel, 25, 0.25) == list(range(26, 31))
    with pytest.raises(InsufficientHistoryError):
        cv_targets(small_panel, 30, 0.25)


def test_parametric_candidates_skip_infeasible_pairs() -> None:
    grid = ParametricGrid(K=[3], alpha1=[0.0, 0.6], alpha2=[0.0, 0.6], half_lives=[2.0])
    cands = parametric_candidates(grid)
    assert len(cands) == 3
    assert all(c.alpha1 + c.alpha2 <= 1.0 for c in cands)


def test_parametric_cv_picks_lowest_loss(small_panel: Panel) -> None:
    grid = ParametricGrid(K=[3, 5], alpha1=[0.0, 1.0], alpha2=[0.0, 1.0], half_lives=[2.0])
    chosen, beta, rows = estimate_weights_parametric_cv(
        small_panel, grid, cv=CvScheme(holdout_fraction=0.3)
    )
    assert len(rows) == 2 * 3
    best = min(r.cv_loss for r in rows)
    assert beta.meta["cv_loss"] == pytest.approx(best)
    assert beta.K == chosen.K
    targets = cv_targets(small_panel, 5, 0.3)
    direct = forward_chain_losses(small_panel, beta, targets, WermProblem(), "mse")
    assert float(direct.mean()) == pytest.approx(best)


def test_half_life_cv_skips_long_windows(small_panel: Panel) -> None:
    H, beta, rows = select_half_life_cv(
        small_panel, half_lives=(1.0, 4.0), K_values=(3, 5, 100)
    )
    assert len(rows) == 4
    assert {r.K for r in rows} == {3, 5}
    assert all(r.alpha3 == 1.0 for r in rows)
    assert beta.meta["cv_loss"] == pytest.approx(min(r.cv_loss for r in rows))
    np.testing.assert_allclose(beta.beta, exponential_reference_weights(H, beta.K).beta)
    with pytest.raises(InsufficientHistoryError):
        select_half_life_cv(small_panel, K_values=(40,))


def test_forward_chain_losses_are_one_step_ahead(small_panel: Panel) -> None:
    beta = WeightVector.uniform(2)
    losses = forward_chain_losses(small_panel, beta, [5, 6], WermProblem(), "mse")
    assert losses.shape == (2,)
    assert np.all(losses > 0)
