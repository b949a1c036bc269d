"""Command-line entry point: ``fedspars run|sweep|solve|oracle|verify``."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .control import oracle_brute_force, solve_scheme
from .experiment import ExperimentConfig, build, calibrate, run_experiment, sweep_intensity, verify_run, write_sweep_csv


def _fail(exc: Exception) -> None:
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
    sys.exit(1)


def _load(path: str) -> ExperimentConfig:
    return ExperimentConfig.load(path)


@click.group()
def main() -> None:
    """Energy-aware compressed federated learning simulator."""


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Override output directory.")
def run(config: str, out: str | None) -> None:
    """Solve each scheme's plan, simulate it and write traces."""
    try:
        path = run_experiment(_load(config), out)
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        _fail(exc)
    click.echo(json.dumps({"output_dir": str(path)}))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", type=click.Choice(["zeta_com", "zeta_cmp"]), required=True)
@click.option("--values", required=True, help="Comma-separated intensities, ascending.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output path.")
def sweep(config: str, axis: str, values: str, out: str | None) -> None:
    """Per-group sparsity and synchronization period versus intensity."""
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
        rows = sweep_intensity(_load(config), axis, vals)
        if out:
            write_sweep_csv(rows, axis, out)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(json.dumps(rows))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--scheme", default="flexible")
def solve(config: str, scheme: str) -> None:
    """Print the compression plan chosen by a scheme."""
    try:
        cfg = _load(config)
        setup = build(cfg)
        calibrate(setup)
        plan = solve_scheme(setup.em, scheme)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(plan.to_json())


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_n", default=400, show_default=True)
def oracle(config: str, grid_n: int) -> None:
    """Brute-force plan for small populations (at most 3 participants)."""
    try:
        cfg = _load(config)
        setup = build(cfg)
        calibrate(setup)
        plan = oracle_brute_force(setup.em, grid_n)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(plan.to_json())


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def verify(run_dir: str) -> None:
    """Re-check invariants, trace integrity and the convergence bound of a finished run."""
    try:
        reports = verify_run(Path(run_dir))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(json.dumps(reports, indent=2, sort_keys=True, default=float))
    ok = all(
        r.get("trace_reproduced", True) and r.get("lemmas_ok", True) and r.get("finite", True)
        and r.get("cumulative_monotone", True)
        for r in reports.values()
    )
    sys.exit(0 if ok else 2)


if __name__ == "__main__":
    main()
