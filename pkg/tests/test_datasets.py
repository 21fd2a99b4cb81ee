from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest

from rider.backtest import run_backtest
from rider.config import BacktestConfig, MethodSpec, PanelSchema
from rider.datasets import (
    load_cv_table_csv,
    load_model_json,
    load_moments_csv,
    load_panel_csv,
    load_report_json,
    load_scores_csv,
    load_trajectory_csv,
    load_weight_field_csv,
    load_weights,
    load_weights_csv,
    write_cv_table_csv,
    write_lag_summary_csv,
    write_model_json,
    write_moments_csv,
    write_panel_csv,
    write_report_json,
    write_scores_csv,
    write_trajectory_csv,
    write_weight_field_csv,
    write_weights_csv,
    write_weights_json,
)
from rider.errors import PanelFormatError, RiderValidationError
from rider.estimator import CvRow, default_test_functions, evaluate_test_functions
from rider.rider_types import Panel, WeightField, WeightVector
from rider.werm import fit_weighted_erm


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_panel_round_trip_is_exact(tmp_path: Path, small_panel: Panel) -> None:
    p = tmp_path / "panel.csv"
    write_panel_csv(small_panel, p)
    assert p.read_text(encoding="utf-8").splitlines()[0] == "t,y,x1,x2"
    again = load_panel_csv(p)
    assert again.times == small_panel.times
    for a, b in zip(small_panel, again, strict=True):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.outcomes, b.outcomes)
        assert b.label is None


def test_non_numeric_cell_reports_row_and_column(tmp_path: Path) -> None:
    lines = ["t,y,x1"] + [f"{i},1.0,2.0" for i in range(1, 9)]
    lines[7] = "7,1.0,abc"
    p = _write(tmp_path / "bad.csv", "\n".join(lines) + "\n")
    with pytest.raises(PanelFormatError, match="row 7") as exc:
        load_panel_csv(p)
    assert exc.value.row == 7
    assert exc.value.column == "x1"


def test_blank_rows_keep_their_row_numbers(tmp_path: Path) -> None:
    text = "t,y,x1\n1,1.0,2.0\n\n2,1.0,2.0\n\n3,1.0,oops\n"
    with pytest.raises(PanelFormatError, match="row 5") as exc:
        load_panel_csv(_write(tmp_path / "gappy.csv", text))
    assert exc.value.row == 5


def test_structural_errors(tmp_path: Path) -> None:
    with pytest.raises(PanelFormatError) as exc:
        load_panel_csv(_write(tmp_path / "a.csv", "t,x1\n1,2\n"))
    assert exc.value.column == "y"
    with pytest.raises(PanelFormatError, match="cells"):
        load_panel_csv(_write(tmp_path / "b.csv", "t,y,x1\n1,2\n"))
    with pytest.raises(PanelFormatError, match="empty"):
        load_panel_csv(_write(tmp_path / "c.csv", ""))
    with pytest.raises(PanelFormatError, match="integer"):
        load_panel_csv(_write(tmp_path / "d.csv", "t,y,x1\n1.5,2,3\n"))
    with pytest.raises(FileNotFoundError):
        load_panel_csv(tmp_path / "missing.csv")


def test_schema_selects_columns(tmp_path: Path) -> None:
    p = _write(tmp_path / "p.csv", "week,ret,a,b\n3,1.0,2.0,9.0\n4,1.5,2.5,9.5\n")
    schema = PanelSchema(time_column="week", outcome_column="ret", feature_columns=["b"])
    panel = load_panel_csv(p, schema)
    assert panel.times == [3, 4]
    assert panel.d == 1
    np.testing.assert_array_equal(panel[1].features, [[9.5]])


def test_gaps_are_dropped_and_reindexed(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    caplog.set_level(logging.WARNING, logger="rider")
    p = _write(tmp_path / "gap.csv", "t,y,x1\n1,0,0\n2,1,1\n2,2,2\n4,3,3\n")
    panel = load_panel_csv(p)
    assert panel.times == [1, 2, 3]
    assert panel[1].n == 2
    assert panel[2].label == "4"
    events = {r.msg["event"] for r in caplog.records if isinstance(r.msg, dict)}
    assert {"panel_group_dropped", "panel_reindexed"} <= events


def test_calendar_week_grouping(tmp_path: Path) -> None:
    text = (
        "date,y,x1\n"
        "2024-01-01,1,1\n"
        "2024-01-03,2,2\n"
        "2024-01-08,3,3\n"
        "2024-01-15,4,4\n"
    )
    p = _write(tmp_path / "weekly.csv", text)
    panel = load_panel_csv(p, PanelSchema(time_column="date", grouping="calendar_week"))
    assert panel.times == [1, 2, 3]
    assert [ds.n for ds in panel] == [2, 1, 1]
    assert [ds.label for ds in panel] == ["2024-W01", "2024-W02", "2024-W03"]
    with pytest.raises(PanelFormatError, match="ISO date"):
        load_panel_csv(
            _write(tmp_path / "bad.csv", "date,y,x1\nyesterday,1,1\n"),
            PanelSchema(time_column="date", grouping="calendar_week"),
        )


def test_weight_field_round_trip(tmp_path: Path) -> None:
    field = WeightField(np.array([[0.5, 1.5, 1.0], [2.0, 0.0, 1.0]]), start_t=5)
    p = tmp_path / "field.csv"
    write_weight_field_csv(field, p)
    again = load_weight_field_csv(p)
    assert again.start_t == 5
    np.testing.assert_array_equal(again.values, field.values)
    lines = p.read_text(encoding="utf-8").splitlines()
    _write(p, "\n".join(lines[:-1]) + "\n")
    with pytest.raises(PanelFormatError, match="missing"):
        load_weight_field_csv(p)


def test_weight_files(tmp_path: Path) -> None:
    beta = WeightVector(np.array([0.1, 0.2, 0.7]), meta={"method": "pooling"})
    write_weights_csv(beta, tmp_path / "w.csv")
    write_weights_json(beta, tmp_path / "w.json")
    from_csv = load_weights(tmp_path / "w.csv")
    from_json = load_weights(tmp_path / "w.json")
    np.testing.assert_array_equal(from_csv.beta, beta.beta)
    np.testing.assert_array_equal(from_json.beta, beta.beta)
    assert from_json.meta == {"method": "pooling"}
    with pytest.raises(RiderValidationError, match="1..K"):
        load_weights_csv(_write(tmp_path / "gap.csv", "k,beta\n1,0.5\n3,0.5\n"))


def test_moment_matrix_round_trip_keeps_invalid_cells(tmp_path: Path, small_panel: Panel) -> None:
    mm = evaluate_test_functions(small_panel, default_test_functions(2))
    valid = mm.valid.copy()
    valid[2, 1] = False
    mm = mm.with_values(np.where(valid, mm.values, 0.0), valid)
    p = tmp_path / "moments.csv"
    write_moments_csv(mm, p)
    again = load_moments_csv(p)
    assert again.labels == mm.labels
    np.testing.assert_array_equal(again.valid, valid)
    np.testing.assert_array_equal(again.values, mm.values)
    np.testing.assert_array_equal(again.cell_counts, mm.cell_counts)


def test_cv_table_round_trip(tmp_path: Path) -> None:
    rows = [CvRow(10, 0.2, 0.4, 0.4, 0.5, 1.25, 0.1, 7), CvRow(20, 1.0, 0.0, 0.0, 0.8, 2.0, 0.2, 7)]
    write_cv_table_csv(rows, tmp_path / "cv.csv")
    again = load_cv_table_csv(tmp_path / "cv.csv")
    assert [(r.K, r.alpha1, r.cv_loss) for r in again] == [(10, 0.2, 1.25), (20, 1.0, 2.0)]


def test_model_json_round_trip(tmp_path: Path, small_panel: Panel) -> None:
    model = fit_weighted_erm(small_panel.window(10, 3), WeightVector.uniform(3), fitted_at=10)
    write_model_json(model, tmp_path / "model.json")
    again = load_model_json(tmp_path / "model.json")
    np.testing.assert_array_equal(again.theta, model.theta)
    assert again.fitted_at == 10


def test_report_files(tmp_path: Path, small_panel: Panel) -> None:
    cfg = BacktestConfig(
        K=3,
        method=MethodSpec(name="exponential", half_life=2.0),
        baselines=[MethodSpec(name="pooling")],
        target_start=25,
    )
    report = run_backtest(small_panel, cfg)
    write_report_json(report, tmp_path / "report.json")
    again = load_report_json(tmp_path / "report.json")
    assert again.targets == report.targets
    assert again.primary == report.primary
    np.testing.assert_array_equal(again.scores("pooling"), report.scores("pooling"))
    assert again.comparisons[0].mean_pct_diff == pytest.approx(report.comparisons[0].mean_pct_diff)

    write_scores_csv(report, tmp_path / "scores.csv")
    targets, scores = load_scores_csv(tmp_path / "scores.csv")
    assert targets == list(range(25, 31))
    np.testing.assert_array_equal(scores["exponential[H=2]"], report.scores())

    write_trajectory_csv(report, tmp_path / "trajectory.csv")
    t_traj, traj = load_trajectory_csv(tmp_path / "trajectory.csv")
    assert t_traj == targets
    np.testing.assert_array_equal(traj, report.trajectory()[1])

    write_lag_summary_csv(report, tmp_path / "lags.csv")
    lines = (tmp_path / "lags.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "k,median,q1,q3,iqr"
    assert len(lines) == 4


def test_report_keeps_method_order(tmp_path: Path, small_panel: Panel) -> None:
    cfg = BacktestConfig(
        K=3,
        method=MethodSpec(name="pooling"),
        baselines=[
            MethodSpec(name="recent_only", recent_window=2),
            MethodSpec(name="exponential", half_life=2.0),
        ],
        target_start=28,
    )
    write_report_json(run_backtest(small_panel, cfg), tmp_path / "report.json")
    again = load_report_json(tmp_path / "report.json")
    assert list(again.methods) == ["pooling", "recent_only[2]", "exponential[H=2]"]
    assert [c.baseline for c in again.comparisons] == ["recent_only[2]", "exponential[H=2]"]


def test_writers_are_byte_stable(tmp_path: Path, small_panel: Panel) -> None:
    write_panel_csv(small_panel, tmp_path / "a.csv")
    write_panel_csv(load_panel_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
