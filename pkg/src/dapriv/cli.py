"""Command-line front end.

    dapriv run scenario.yaml
    dapriv run scenario.yaml --emit records
    dapriv run scenario.yaml --seed 7 --out results/
    dapriv run scenario.yaml --sweep public_threshold=1:4 --runs 200

Exit code 0 on a clean run, nonzero when an invariant sweep fails.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import harness, report as report_mod
from .scenario import ScenarioError, load_scenario


def _parse_range(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


@click.group()
def main():
    """Deterministic simulator for the patient-controlled data exchange."""


@main.command("run")
@click.argument("scenario_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--emit", "fmt", type=click.Choice(["summary", "records"]), default="summary",
              show_default=True, help="Output format.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--sweep", "sweep_spec", default=None, metavar="PARAM=RANGE",
              help="Rerun varying one parameter, e.g. public_threshold=1:4 or k=1,2,5.")
@click.option("--runs", type=int, default=1, show_default=True,
              help="Seeded repetitions per sweep value.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for delimited output and figures.")
def run_cmd(scenario_path, fmt, seed, sweep_spec, runs, out_dir):
    """Run one scenario (or a parameter sweep over it)."""
    try:
        scenario = load_scenario(scenario_path)
    except ScenarioError as exc:
        raise click.ClickException(str(exc))
    if seed is not None:
        scenario.seed = seed

    if sweep_spec is not None:
        if "=" not in sweep_spec:
            raise click.ClickException("--sweep expects PARAM=RANGE")
        param, range_text = sweep_spec.split("=", 1)
        try:
            values = _parse_range(range_text)
            rows = harness.run_sweep(scenario, param, values, runs=runs)
        except ValueError as exc:
            raise click.ClickException(str(exc))
        click.echo(report_mod.sweep_table(rows))
        if out_dir is not None:
            for path in report_mod.write_sweep_outputs(rows, Path(out_dir)):
                click.echo(f"wrote {path}", err=True)
        return

    report = harness.run(scenario)
    click.echo(report_mod.emit(report, fmt))
    if out_dir is not None:
        for path in report_mod.write_run_outputs(report, Path(out_dir)):
            click.echo(f"wrote {path}", err=True)
    if not report.ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
