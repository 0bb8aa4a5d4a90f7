"""Report rendering: human summary, line-delimited records, CSV tables
for sweeps, and matplotlib figures written next to the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import RunReport, SweepRow


def summary(report: RunReport) -> str:
    flows = report.flows
    completed = sum(1 for f in flows if f.get("status") == "completed")
    aborted = sum(1 for f in flows if f.get("status") == "aborted")
    lines = [
        "=== run summary ===",
        f"flows: {len(flows)} ({completed} completed, {aborted} aborted)",
        f"linkage rate:  {report.adversary_metrics['linkage_rate']:.4f}",
        f"enrichment:    {report.adversary_metrics['enrichment']:.4f}",
        f"precision:     {report.adversary_metrics['precision']:.4f}",
        f"released: {report.released_records} records in {report.released_batches} batch(es)",
        f"quasi-id re-identifications: {report.quasi_linkage['reidentified']}"
        f"/{report.quasi_linkage['profiles_checked']} profiles",
        f"notifications: {report.notifications}",
        "invariants:",
    ]
    for name in sorted(report.invariants):
        mark = "PASS" if report.invariants[name] else "FAIL"
        lines.append(f"  {mark}  {name}")
    lines.append(f"event log digest: {report.event_log_digest}")
    return "\n".join(lines)


def records(report: RunReport) -> str:
    """Line-delimited machine output; each line is one JSON record with a
    'kind' discriminator. Parses back via parse_records."""
    out = [json.dumps({"kind": "header", "digest": report.event_log_digest,
                       "ok": report.ok}, sort_keys=True)]
    for flow in report.flows:
        out.append(json.dumps({"kind": "flow", **flow}, sort_keys=True))
    out.append(json.dumps({"kind": "adversary", **report.adversary_metrics}, sort_keys=True))
    out.append(json.dumps({"kind": "quasi_linkage", **report.quasi_linkage}, sort_keys=True))
    out.append(
        json.dumps(
            {"kind": "invariants", **{k: bool(v) for k, v in report.invariants.items()}},
            sort_keys=True,
        )
    )
    return "\n".join(out)


def parse_records(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def emit(report: RunReport, fmt: str) -> str:
    if fmt == "summary":
        return summary(report)
    if fmt == "records":
        return records(report)
    raise ValueError(f"unknown emit format {fmt!r}")


def write_run_outputs(report: RunReport, out_dir: Path) -> list[Path]:
    """Write the delimited records plus a metrics figure into out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rec_path = out_dir / "records.jsonl"
    rec_path.write_text(records(report) + "\n")
    written.append(rec_path)

    sum_path = out_dir / "summary.txt"
    sum_path.write_text(summary(report) + "\n")
    written.append(sum_path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = ["linkage", "enrichment", "precision"]
    values = [
        report.adversary_metrics["linkage_rate"],
        report.adversary_metrics["enrichment"],
        report.adversary_metrics["precision"],
    ]
    ax.bar(names, values, color=["#c44", "#48a", "#4a6"])
    ax.set_ylabel("metric value")
    ax.set_title("coalition attack metrics")
    fig.tight_layout()
    fig_path = out_dir / "metrics.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    written.append(fig_path)
    return written


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'value':>8}  {'linkage':>8}  {'analytic':>8}"]
    for row in rows:
        analytic = f"{row.analytic_estimate:.4f}" if row.analytic_estimate is not None else "-"
        lines.append(f"{row.value:>8}  {row.linkage_rate:>8.4f}  {analytic:>8}")
    return "\n".join(lines)


def write_sweep_outputs(rows: Sequence[SweepRow], out_dir: Path) -> list[Path]:
    """CSV of the sweep plus a measured-vs-analytic linkage figure."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    param = rows[0].param if rows else "param"

    csv_path = out_dir / f"sweep_{param}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "runs", "linkage_rate", "analytic_estimate"])
        for row in rows:
            writer.writerow(
                [row.param, row.value, row.runs, f"{row.linkage_rate:.6f}",
                 "" if row.analytic_estimate is None else f"{row.analytic_estimate:.6f}"]
            )
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [r.value for r in rows]
    ax.plot(xs, [r.linkage_rate for r in rows], "o-", label="measured")
    if any(r.analytic_estimate is not None for r in rows):
        ax.plot(
            xs,
            [r.analytic_estimate for r in rows],
            "s--",
            label="analytic",
        )
    ax.set_xlabel(param)
    ax.set_ylabel("linkage rate")
    ax.set_title(f"linkage rate vs {param}")
    ax.legend()
    fig.tight_layout()
    fig_path = out_dir / f"sweep_{param}.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    written.append(fig_path)
    return written
