from __future__ import annotations

import json
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import typer
from pydantic import ValidationError

from . import __version__
from .backtest import run_backtest
from .config import (
    BacktestConfig,
    EstimationConfig,
    RunConfig,
    SimulateConfig,
    VerifyConfig,
    format_validation_error,
    load_config_from_file,
    validate_config_file,
    volatility_preset,
)
from .datasets import (
    load_panel_csv,
    load_weights,
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
from .errors import NumericalError, RiderValidationError
from .estimator import (
    build_moments,
    estimate_weights_nonparametric,
    estimate_weights_parametric_cv,
    select_half_life_cv,
    specs_from_config,
)
from .logging_utils import log_event, run_context, sidecar_log
from .rider_types import Panel, WeightVector
from .shift_sim import parent_from_config, process_from_config, simulate_panel
from .verify import run_checks
from .weights import optimal_weights_qp, sigma_w_for_process
from .werm import fit_weighted_erm

app = typer.Typer(help="Weighted ERM under random temporal distribution shift")
config_app = typer.Typer(help="Config utilities")

# Define option defaults at module scope to satisfy Ruff B008
CONFIG_OPT = typer.Option(None, "-c", "--config", help="Path to run config YAML")
OUT_OPT = typer.Option(None, "--out", help="Output directory (overrides output_dir)")
SEED_OPT = typer.Option(None, "--seed", help="Random seed (overrides config and RIDER_SEED)")
PANEL_OPT = typer.Option(None, "--panel", help="Panel CSV (overrides panel.path)")
K_OPT = typer.Option(None, "--K", help="Window size K")
BASELINE_OPT = typer.Option(
    [], "--baseline", help="Baseline method(s) scored on the same targets. Can repeat."
)

# typer re-exports BadParameter but not its base, the usage error of the click it runs on
UsageError: type[Exception] = typer.BadParameter.__bases__[0]


def version_callback(value: bool) -> None:
    if value:
        typer.echo(__version__)
        raise typer.Exit()


@app.callback()
def main_callback(
    version: bool | None = typer.Option(
        None,
        "--version",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit.",
    ),
) -> None:
    """Top-level callback for global options (e.g., --version)."""


def _load(config: str | None, out: str | None, seed: int | None) -> RunConfig:
    try:
        cfg = load_config_from_file(config)
    except ValidationError as e:
        typer.echo("Config invalid:", err=True)
        for msg in format_validation_error(e):
            typer.echo(f"  - {msg}", err=True)
        raise typer.Exit(code=1) from None
    except (FileNotFoundError, ValueError) as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(code=1) from None
    update: dict[str, Any] = {}
    if out is not None:
        update["output_dir"] = out
    if seed is not None:
        update["seed"] = seed
    return cfg.model_copy(update=update) if update else cfg


@contextmanager
def _run(cfg: RunConfig, command: str) -> Iterator[Path]:
    """Sidecar log in the output directory plus the exit-code mapping for library errors."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with run_context(), sidecar_log(out_dir / "run.log"):
        log_event(event="command_started", details={"command": command, "seed": cfg.seed})
        try:
            yield out_dir
        except ValidationError as e:
            typer.echo("Invalid options:", err=True)
            for msg in format_validation_error(e):
                typer.echo(f"  - {msg}", err=True)
            raise typer.Exit(code=1) from None
        except (RiderValidationError, FileNotFoundError) as e:
            typer.echo(f"Error: {e}", err=True)
            raise typer.Exit(code=1) from None
        except NumericalError as e:
            typer.echo(f"Numerical failure: {e}", err=True)
            raise typer.Exit(code=2) from None


def _panel(cfg: RunConfig, panel_path: str | None) -> Panel:
    path = panel_path or cfg.panel.path
    if path is not None:
        return load_panel_csv(path, cfg.panel)
    sim = cfg.simulate
    panel, _ = simulate_panel(
        parent_from_config(sim.parent),
        process_from_config(sim.process),
        sim.T,
        sim.m,
        sim.resolved_sample_sizes(),
        cfg.seed,
    )
    return panel


def _echo(payload: dict[str, Any]) -> None:
    typer.echo(json.dumps(payload, indent=2, sort_keys=True))


@app.command()
def simulate(
    config: str | None = CONFIG_OPT,
    out: str | None = OUT_OPT,
    seed: int | None = SEED_OPT,
    T: int | None = typer.Option(None, "--T", help="Number of time steps"),
    m: int | None = typer.Option(None, "--m", help="Number of bins"),
    n: int | None = typer.Option(None, "--n", help="Samples per dataset"),
) -> None:
    """Simulate a panel under random ARMA shift; writes panel.csv and weight_field.csv."""
    cfg = _load(config, out, seed)
    with _run(cfg, "simulate") as out_dir:
        data = cfg.simulate.model_dump()
        data.update({k: v for k, v in {"T": T, "m": m, "n": n}.items() if v is not None})
        if T is not None or n is not None:
            data["sample_sizes"] = None
        sim = SimulateConfig.model_validate(data)
        panel, field = simulate_panel(
            parent_from_config(sim.parent),
            process_from_config(sim.process),
            sim.T,
            sim.m,
            sim.resolved_sample_sizes(),
            cfg.seed,
        )
        write_panel_csv(panel, out_dir / "panel.csv")
        write_weight_field_csv(field, out_dir / "weight_field.csv")
        _echo(
            {
                "panel": str(out_dir / "panel.csv"),
                "weight_field": str(out_dir / "weight_field.csv"),
                "T": sim.T,
                "m": sim.m,
                "clamped": field.clamped,
            }
        )


@app.command("estimate-weights")
def estimate_weights(
    config: str | None = CONFIG_OPT,
    out: str | None = OUT_OPT,
    seed: int | None = SEED_OPT,
    panel_path: str | None = PANEL_OPT,
    K: int | None = K_OPT,
    method: str = typer.Option(
        "rider_nonparametric",
        "--method",
        help=(
            "rider_nonparametric | rider_parametric | exponential_cv | optimal "
            "(from the configured process)"
        ),
    ),
) -> None:
    """Estimate a weight vector; writes weights.json and weights.csv."""
    cfg = _load(config, out, seed)
    if method not in {"rider_nonparametric", "rider_parametric", "exponential_cv", "optimal"}:
        raise typer.BadParameter(f"unknown method '{method}'", param_hint="--method")
    with _run(cfg, "estimate-weights") as out_dir:
        est = cfg.estimation
        if K is not None:
            est = EstimationConfig.model_validate({**est.model_dump(), "K": K})
        if method == "optimal":
            sim = cfg.simulate
            sigma_w = sigma_w_for_process(process_from_config(sim.process), est.K)
            beta = optimal_weights_qp(sigma_w, sim.m / sim.n, est.constraints)
        else:
            panel = _panel(cfg, panel_path)
            if method == "rider_nonparametric":
                specs = specs_from_config(cfg.test_functions, panel.d)
                mm = build_moments(panel, specs, est)
                write_moments_csv(mm, out_dir / "moments.csv")
                beta = estimate_weights_nonparametric(mm, est)
            elif method == "exponential_cv":
                K_values = cfg.grid.K if K is None else [K]
                _, beta, rows = select_half_life_cv(
                    panel, cfg.grid.half_lives, K_values, cfg.problem, cfg.cv
                )
                write_cv_table_csv(rows, out_dir / "cv_table.csv")
            else:
                grid = cfg.grid if K is None else cfg.grid.model_copy(update={"K": [K]})
                _, beta, rows = estimate_weights_parametric_cv(panel, grid, cfg.problem, cfg.cv)
                write_cv_table_csv(rows, out_dir / "cv_table.csv")
        write_weights_json(beta, out_dir / "weights.json")
        write_weights_csv(beta, out_dir / "weights.csv")
        _echo({"K": beta.K, "beta": beta.beta.tolist(), "method": method})


@app.command()
def fit(
    config: str | None = CONFIG_OPT,
    out: str | None = OUT_OPT,
    seed: int | None = SEED_OPT,
    panel_path: str | None = PANEL_OPT,
    weights: str | None = typer.Option(
        None, "--weights", help="Weight vector (JSON or CSV); estimated from the panel if omitted"
    ),
    target: int | None = typer.Option(
        None, "--target", help="Fit on the K datasets before this time (default: the last K)"
    ),
) -> None:
    """Fit weighted ERM on the K most recent datasets; writes model.json."""
    cfg = _load(config, out, seed)
    with _run(cfg, "fit") as out_dir:
        panel = _panel(cfg, panel_path)
        beta: WeightVector
        if weights is not None:
            beta = load_weights(weights)
        else:
            specs = specs_from_config(cfg.test_functions, panel.d)
            beta = estimate_weights_nonparametric(
                build_moments(panel, specs, cfg.estimation), cfg.estimation
            )
        K = beta.K
        if target is not None:
            window = panel.window(target, K)
        else:
            if len(panel) < K:
                raise RiderValidationError(f"panel has {len(panel)} datasets, weights need K={K}")
            window = list(panel)[-K:]
        model = fit_weighted_erm(window, beta, cfg.problem, fitted_at=target)
        write_model_json(model, out_dir / "model.json")
        _echo({"model": str(out_dir / "model.json"), "theta": model.theta.tolist(), "K": K})


@app.command()
def backtest(
    config: str | None = CONFIG_OPT,
    out: str | None = OUT_OPT,
    seed: int | None = SEED_OPT,
    panel_path: str | None = PANEL_OPT,
    K: int | None = K_OPT,
    method: str | None = typer.Option(
        None,
        "--method",
        help="rider_nonparametric | rider_parametric | pooling | recent_only | exponential",
    ),
    half_life: float | None = typer.Option(None, "--half-life", help="Exponential half-life H"),
    recent_window: int | None = typer.Option(
        None, "--recent-window", help="Datasets used by recent_only"
    ),
    baseline: list[str] = BASELINE_OPT,
    preset: str | None = typer.Option(None, "--preset", help="Named preset: volatility"),
    n_jobs: int | None = typer.Option(None, "--n-jobs", help="Parallel workers over targets"),
) -> None:
    """Rolling backtest; writes report.json, scores.csv, trajectory.csv and lag_summary.csv."""
    cfg = _load(config, out, seed)
    with _run(cfg, "backtest") as out_dir:
        bt = cfg.backtest
        if preset is not None:
            if preset != "volatility":
                raise RiderValidationError(f"unknown preset '{preset}'")
            bt = volatility_preset(K=K or 52, half_life=half_life or 9.0)
        data = bt.model_dump()
        if K is not None:
            data["K"] = K
            data["estimation"]["K"] = K
        if method is not None:
            data["method"] = {"name": method}
        if half_life is not None:
            data["method"]["half_life"] = half_life
        if recent_window is not None:
            data["method"]["recent_window"] = recent_window
        if baseline:
            data["baselines"] = [{"name": b} for b in baseline]
        if n_jobs is not None:
            data["n_jobs"] = n_jobs
        if not data["test_functions"]:
            data["test_functions"] = [tf.model_dump() for tf in cfg.test_functions]
        bt = BacktestConfig.model_validate(data)
        panel = _panel(cfg, panel_path)
        report = run_backtest(panel, bt)
        write_report_json(report, out_dir / "report.json")
        write_scores_csv(report, out_dir / "scores.csv")
        write_trajectory_csv(report, out_dir / "trajectory.csv")
        write_lag_summary_csv(report, out_dir / "lag_summary.csv")
        _echo(
            {
                "targets": len(report.targets),
                "aggregates": {k: v.aggregate for k, v in report.methods.items()},
                "comparisons": [c.to_dict() for c in report.comparisons],
            }
        )


@app.command()
def verify(
    config: str | None = CONFIG_OPT,
    out: str | None = OUT_OPT,
    seed: int | None = SEED_OPT,
    full: bool = typer.Option(False, "--full", help="Also run consistency and recovery checks"),
    clt_reps: int | None = typer.Option(None, "--clt-reps", help="Monte-Carlo replications"),
    clt_m: int | None = typer.Option(None, "--clt-m", help="Bins (and samples) for the CLT check"),
) -> None:
    """Run the closed-form, CLT and formula checks; exit 0 iff all pass."""
    cfg = _load(config, out, seed)
    with _run(cfg, "verify"):
        overrides = {"clt_reps": clt_reps, "clt_m": clt_m}
        vc = VerifyConfig.model_validate(
            {**cfg.verify.model_dump(), **{k: v for k, v in overrides.items() if v is not None}}
        )
        results = run_checks(vc, seed=cfg.seed, full=full)
        for r in results:
            typer.echo(r.line())
        failed = [r.name for r in results if not r.passed]
        if failed:
            typer.echo(f"{len(failed)} of {len(results)} checks failed", err=True)
            raise typer.Exit(code=2)


@config_app.command("validate")
def config_validate(
    file: str = typer.Option(..., "-f", "--file", help="Path to config YAML"),
    env_prefix: str = typer.Option("RIDER_", "--env-prefix", help="ENV override prefix"),
) -> None:
    """Validate a configuration file, applying env overrides if present."""
    cfg, errors = validate_config_file(file, env_prefix=env_prefix)
    if errors:
        typer.echo("Config invalid:")
        for e in errors:
            typer.echo(f"  - {e}")
        raise typer.Exit(code=1)
    typer.echo("Config OK")


app.add_typer(config_app, name="config")


def main(argv: list[str] | None = None) -> int:
    """Console entry point for `rider`; usage errors exit 1."""
    try:
        rv = app(args=argv, prog_name="rider", standalone_mode=False)
    except UsageError as e:
        e.show()  # type: ignore[attr-defined]
        return 1
    except (typer.Abort, KeyboardInterrupt):
        typer.echo("Aborted.", err=True)
        return 130
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
