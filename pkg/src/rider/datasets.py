"""CSV and JSON persistence for panels, weight fields, weights, moments, models and reports.

Floats are written with 17 significant digits so every file loads back bit-exactly.
Payloads never carry timestamps.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Sequence
from datetime import date
from pathlib import Path
from typing import Any

import numpy as np

from .backtest import (
    BacktestReport,
    MethodResult,
    TargetResult,
    compare_scores,
    weight_trajectory_summary,
)
from .config import BacktestConfig, MethodSpec, PanelSchema
from .errors import PanelFormatError, RiderValidationError
from .estimator import CvRow, MomentMatrix
from .logging_utils import jsonable, log_event
from .rider_types import Panel, TimedDataset, WeightField, WeightVector
from .werm import WermModel


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header plus non-blank data rows, each with its data-row number (blank rows count)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    with p.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelFormatError(f"{p} is empty; a header row is required", row=0) from None
        rows = [(i, r) for i, r in enumerate(reader, start=1) if any(c.strip() for c in r)]
    return header, rows


def _write_json(path: str | Path, payload: Any) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def _column(header: list[str], name: str, path: str | Path) -> int:
    try:
        return header.index(name)
    except ValueError:
        raise PanelFormatError(f"{path}: missing column '{name}'", column=name) from None


def _number(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise PanelFormatError(
            f"row {row}, column '{column}': non-numeric value {cell!r}", row=row, column=column
        ) from None
    if not math.isfinite(v):
        raise PanelFormatError(
            f"row {row}, column '{column}': non-finite value {cell!r}", row=row, column=column
        )
    return v


# --- panels -------------------------------------------------------------------------------


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Columns t, y, x1..xd; one row per sample."""
    header = ["t", "y", *[f"x{i + 1}" for i in range(panel.d)]]

    def rows() -> Iterable[list[str]]:
        for ds in panel:
            for x, y in zip(ds.features, ds.outcomes, strict=True):
                yield [str(ds.t), fmt(y), *map(fmt, x)]

    _write_rows(path, header, rows())


def _time_key(cell: str, row: int, schema: PanelSchema) -> int:
    col = schema.time_column
    if schema.grouping == "calendar_week":
        try:
            year, week, _ = date.fromisoformat(cell.strip()[:10]).isocalendar()
        except ValueError:
            raise PanelFormatError(
                f"row {row}, column '{col}': expected an ISO date, got {cell!r}",
                row=row,
                column=col,
            ) from None
        # weeks since 0001-01-01, a Monday
        return (date.fromisocalendar(year, week, 1).toordinal() - 1) // 7
    v = _number(cell, row, col)
    if not v.is_integer():
        raise PanelFormatError(
            f"row {row}, column '{col}': time index must be an integer, got {cell!r}",
            row=row,
            column=col,
        )
    return int(v)


def _key_label(key: int, schema: PanelSchema) -> str:
    if schema.grouping == "calendar_week":
        year, week, _ = date.fromordinal(key * 7 + 1).isocalendar()
        return f"{year}-W{week:02d}"
    return str(key)


def load_panel_csv(path: str | Path, schema: PanelSchema | None = None) -> Panel:
    """Group rows into datasets by time index or calendar week.

    Order within a group follows the file. Gaps in the grouping key are dropped with a
    warning and the remaining groups are re-indexed consecutively; the original key is
    kept as each dataset's label.
    """
    schema = schema or PanelSchema()
    header, rows = _read_rows(path)
    t_col = _column(header, schema.time_column, path)
    y_col = _column(header, schema.outcome_column, path)
    if schema.feature_columns is None:
        feature_names = [h for i, h in enumerate(header) if i not in {t_col, y_col}]
    else:
        feature_names = list(schema.feature_columns)
    if not feature_names:
        raise PanelFormatError(f"{path}: no feature columns")
    x_cols = [_column(header, name, path) for name in feature_names]

    groups: dict[int, tuple[list[list[float]], list[float]]] = {}
    for i, raw in rows:
        if len(raw) != len(header):
            raise PanelFormatError(
                f"row {i}: expected {len(header)} cells, got {len(raw)}", row=i
            )
        key = _time_key(raw[t_col], i, schema)
        xs = [_number(raw[c], i, header[c]) for c in x_cols]
        y = _number(raw[y_col], i, header[y_col])
        bucket = groups.setdefault(key, ([], []))
        bucket[0].append(xs)
        bucket[1].append(y)
    if not groups:
        raise PanelFormatError(f"{path}: no usable groups", row=len(rows))

    keys = sorted(groups)
    dropped = (keys[-1] - keys[0] + 1) - len(keys)
    if dropped:
        log_event(
            event="panel_group_dropped",
            details={"path": str(path), "dropped": dropped, "kept": len(keys)},
            level=logging.WARNING,
        )
    reindex = dropped > 0 or schema.grouping == "calendar_week"
    start = 1 if schema.grouping == "calendar_week" else keys[0]
    if reindex:
        log_event(
            event="panel_reindexed",
            details={"path": str(path), "grouping": schema.grouping, "groups": len(keys)},
            level=logging.WARNING,
        )
    datasets = []
    for pos, key in enumerate(keys):
        xs, ys = groups[key]
        datasets.append(
            TimedDataset(
                t=start + pos if reindex else key,
                features=np.array(xs, dtype=float),
                outcomes=np.array(ys, dtype=float),
                label=_key_label(key, schema) if reindex else None,
            )
        )
    return Panel(datasets)


# --- weight fields and weight vectors -----------------------------------------------------


def write_weight_field_csv(field: WeightField, path: str | Path) -> None:
    rows = (
        [str(field.start_t + i), str(j + 1), fmt(field.values[i, j])]
        for i in range(field.T)
        for j in range(field.m)
    )
    _write_rows(path, ["t", "j", "w"], rows)


def load_weight_field_csv(path: str | Path) -> WeightField:
    header, rows = _read_rows(path)
    cols = [_column(header, c, path) for c in ("t", "j", "w")]
    entries = []
    for i, r in rows:
        t, j, w = (_number(r[c], i, name) for c, name in zip(cols, ("t", "j", "w"), strict=True))
        entries.append((int(t), int(j), w))
    if not entries:
        raise PanelFormatError(f"{path}: weight field is empty")
    t0 = min(e[0] for e in entries)
    T = max(e[0] for e in entries) - t0 + 1
    m = max(e[1] for e in entries)
    values = np.full((T, m), np.nan)
    for t, j, w in entries:
        values[t - t0, j - 1] = w
    if np.isnan(values).any():
        raise PanelFormatError(f"{path}: weight field has missing (t, j) cells")
    return WeightField(values, start_t=t0)


def write_weights_csv(beta: WeightVector, path: str | Path) -> None:
    _write_rows(path, ["k", "beta"], ([str(k + 1), fmt(b)] for k, b in enumerate(beta.beta)))


def load_weights_csv(path: str | Path) -> WeightVector:
    header, rows = _read_rows(path)
    k_col, b_col = _column(header, "k", path), _column(header, "beta", path)
    pairs = sorted(
        (int(_number(r[k_col], i, "k")), _number(r[b_col], i, "beta"))
        for i, r in rows
    )
    if [k for k, _ in pairs] != list(range(1, len(pairs) + 1)):
        raise RiderValidationError(f"{path}: lags must be 1..K without gaps")
    return WeightVector(np.array([b for _, b in pairs]))


def weights_to_dict(beta: WeightVector) -> dict[str, Any]:
    return {"K": beta.K, "beta": beta.beta.tolist(), "meta": beta.meta}


def write_weights_json(beta: WeightVector, path: str | Path) -> None:
    _write_json(path, weights_to_dict(beta))


def load_weights_json(path: str | Path) -> WeightVector:
    data = _read_json(path)
    beta = WeightVector(np.asarray(data["beta"], dtype=float), meta=dict(data.get("meta", {})))
    if int(data.get("K", beta.K)) != beta.K:
        raise RiderValidationError(f"{path}: K={data['K']} but {beta.K} weights")
    return beta


def load_weights(path: str | Path) -> WeightVector:
    """Load a weight vector from either of its two formats, by file suffix."""
    if Path(path).suffix.lower() == ".csv":
        return load_weights_csv(path)
    return load_weights_json(path)


# --- moments and CV tables ----------------------------------------------------------------


def write_moments_csv(mm: MomentMatrix, path: str | Path) -> None:
    """Columns t, label, value, count; invalid cells are written as nan."""
    rows = (
        [
            str(int(mm.times[i])),
            label,
            fmt(mm.values[i, j]) if mm.valid[i, j] else "nan",
            str(int(mm.cell_counts[i, j])),
        ]
        for i in range(mm.T)
        for j, label in enumerate(mm.labels)
    )
    _write_rows(path, ["t", "label", "value", "count"], rows)


def load_moments_csv(path: str | Path) -> MomentMatrix:
    header, rows = _read_rows(path)
    t_c, l_c, v_c, n_c = (_column(header, c, path) for c in ("t", "label", "value", "count"))
    times: list[int] = []
    labels: list[str] = []
    cells: dict[tuple[int, str], tuple[float, int]] = {}
    for i, r in rows:
        t = int(_number(r[t_c], i, "t"))
        label = r[l_c]
        if t not in times:
            times.append(t)
        if label not in labels:
            labels.append(label)
        try:
            value = float(r[v_c])
        except ValueError:
            raise PanelFormatError(
                f"row {i}: bad value {r[v_c]!r}", row=i, column="value"
            ) from None
        cells[(t, label)] = (value, int(_number(r[n_c], i, "count")))
    values = np.zeros((len(times), len(labels)))
    valid = np.zeros_like(values, dtype=bool)
    counts = np.zeros_like(values, dtype=int)
    for (t, label), (v, n) in cells.items():
        a, b = times.index(t), labels.index(label)
        counts[a, b] = n
        if math.isfinite(v):
            values[a, b] = v
            valid[a, b] = True
    return MomentMatrix(values, valid, counts, np.array(times), tuple(labels))


_CV_HEADER = ["K", "alpha1", "alpha2", "alpha3", "theta", "cv_loss", "cv_se"]


def write_cv_table_csv(rows: Sequence[CvRow], path: str | Path) -> None:
    _write_rows(
        path,
        _CV_HEADER,
        (
            [str(r.K), fmt(r.alpha1), fmt(r.alpha2), fmt(r.alpha3), fmt(r.theta),
             fmt(r.cv_loss), fmt(r.cv_se)]
            for r in rows
        ),
    )


def load_cv_table_csv(path: str | Path) -> list[CvRow]:
    header, rows = _read_rows(path)
    cols = [_column(header, c, path) for c in _CV_HEADER]
    out = []
    for _, r in rows:
        v = [float(r[c]) for c in cols]
        out.append(CvRow(int(v[0]), v[1], v[2], v[3], v[4], v[5], v[6], 0))
    return out


# --- models and reports -------------------------------------------------------------------


def write_model_json(model: WermModel, path: str | Path) -> None:
    _write_json(path, model.to_dict())


def load_model_json(path: str | Path) -> WermModel:
    return WermModel.from_dict(_read_json(path))


def _method_to_dict(label: str, res: MethodResult) -> dict[str, Any]:
    return {
        "label": label,
        "method": res.method.model_dump(),
        "aggregate": res.aggregate,
        "failures": res.failures,
        "results": [
            {
                "t": r.t,
                "score": r.score,
                "beta": None if r.beta is None else r.beta.tolist(),
                "theta": None if r.theta is None else r.theta.tolist(),
                "error": r.error,
            }
            for r in res.results
        ],
    }


def report_to_dict(report: BacktestReport) -> dict[str, Any]:
    """JSON form of a report; `methods` is a list so the primary-then-baselines order survives."""
    return {
        "config": report.config.model_dump(),
        "primary": report.primary,
        "targets": report.targets,
        "methods": [_method_to_dict(label, res) for label, res in report.methods.items()],
        "comparisons": [c.to_dict() for c in report.comparisons],
    }


def write_report_json(report: BacktestReport, path: str | Path) -> None:
    _write_json(path, report_to_dict(report))


def load_report_json(path: str | Path) -> BacktestReport:
    data = _read_json(path)
    methods = {}
    for res in data["methods"]:
        label = res["label"]
        results = [
            TargetResult(
                t=int(r["t"]),
                score=float(r["score"]),
                beta=None if r["beta"] is None else np.asarray(r["beta"], dtype=float),
                theta=None if r["theta"] is None else np.asarray(r["theta"], dtype=float),
                error=r["error"],
            )
            for r in res["results"]
        ]
        methods[label] = MethodResult(label, MethodSpec.model_validate(res["method"]), results)
    primary = data["primary"]
    comparisons = [compare_scores(methods[primary], m) for k, m in methods.items() if k != primary]
    return BacktestReport(
        BacktestConfig.model_validate(data["config"]), methods, primary, comparisons
    )


def write_scores_csv(report: BacktestReport, path: str | Path) -> None:
    """One row per target: t followed by each method's score."""
    labels = list(report.methods)
    score_cols = [report.methods[lb].scores() for lb in labels]
    rows = (
        [str(t), *[fmt(col[i]) for col in score_cols]] for i, t in enumerate(report.targets)
    )
    _write_rows(path, ["t", *labels], rows)


def load_scores_csv(path: str | Path) -> tuple[list[int], dict[str, np.ndarray]]:
    header, rows = _read_rows(path)
    t_col = _column(header, "t", path)
    targets = [int(r[t_col]) for _, r in rows]
    scores = {
        h: np.array([float(r[i]) for _, r in rows]) for i, h in enumerate(header) if i != t_col
    }
    return targets, scores


def write_trajectory_csv(
    report: BacktestReport, path: str | Path, label: str | None = None
) -> None:
    """Long format t, k, beta for the fitted weight of every lag at every target."""
    targets, traj = report.trajectory(label)
    rows = (
        [str(t), str(k + 1), fmt(traj[i, k])]
        for i, t in enumerate(targets)
        for k in range(traj.shape[1])
    )
    _write_rows(path, ["t", "k", "beta"], rows)


def load_trajectory_csv(path: str | Path) -> tuple[list[int], np.ndarray]:
    header, rows = _read_rows(path)
    t_c, k_c, b_c = (_column(header, c, path) for c in ("t", "k", "beta"))
    by_t: dict[int, dict[int, float]] = {}
    for _, r in rows:
        by_t.setdefault(int(r[t_c]), {})[int(r[k_c])] = float(r[b_c])
    targets = sorted(by_t)
    if not targets:
        return [], np.zeros((0, 0))
    K = max(max(v) for v in by_t.values())
    return targets, np.array([[by_t[t][k] for k in range(1, K + 1)] for t in targets])


def write_lag_summary_csv(
    report: BacktestReport, path: str | Path, label: str | None = None
) -> None:
    summary = weight_trajectory_summary(report, label)
    _write_rows(
        path,
        ["k", "median", "q1", "q3", "iqr"],
        ([str(s.k), fmt(s.median), fmt(s.q1), fmt(s.q3), fmt(s.iqr)] for s in summary),
    )
