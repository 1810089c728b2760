"""Report rendering: delimited metrics, aligned text tables, and figures.

Every evaluation run emits a long-form CSV (model, K, HR, coverage,
n_events), a plain-text comparison table with the best model per cutoff
flagged, and PNG figures (grouped HR@K bars plus a coverage bar chart)
written next to the delimited output.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import ComparisonTable, MetricsReport

REPORT_HEADER = ["model", "K", "HR", "coverage", "n_events"]


def write_report_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            for k in r.ks:
                w.writerow([r.model_name, k, f"{r.hit_rate[k]:.6f}",
                            f"{r.coverage:.6f}", r.n_events])


def read_report_csv(path: str | Path) -> list[MetricsReport]:
    rows: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError(f"expected header {REPORT_HEADER}, got {header}")
        for model, k, hr, cov, n in reader:
            d = rows.setdefault(model, {"hr": {}, "coverage": float(cov), "n": int(n)})
            d["hr"][int(k)] = float(hr)
    return [
        MetricsReport(model, d["hr"], d["coverage"], d["n"], config_fingerprint="")
        for model, d in rows.items()
    ]


def render_table(table: ComparisonTable) -> str:
    """Aligned text table; the best value per cutoff is wrapped in ``**``."""
    headers = ["Model"] + [f"HR@{k}" for k in table.ks] + ["Coverage"]
    body: list[list[str]] = []
    for model, hr, coverage in table.rows:
        cells = [model]
        for k in table.ks:
            value = f"{hr[k]:.3f}"
            cells.append(f"**{value}**" if table.is_best(k, hr[k]) else value)
        cells.append(f"{coverage:.3f}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [headers] + body) for i in range(len(headers))]
    lines = []
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_comparison(table: ComparisonTable, path: str | Path) -> None:
    Path(path).write_text(render_table(table), encoding="utf-8")


def write_figures(reports: Sequence[MetricsReport], out_dir: str | Path,
                  prefix: str = "metrics") -> list[Path]:
    """Render HR@K and coverage charts as PNG files; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if not reports:
        return written
    ks = reports[0].ks
    models = [r.model_name for r in reports]

    fig, ax = plt.subplots(figsize=(max(6.0, 1.3 * len(models)), 4.0))
    width = 0.8 / max(len(ks), 1)
    xs = range(len(models))
    for j, k in enumerate(ks):
        vals = [r.hit_rate[k] for r in reports]
        ax.bar([x + j * width for x in xs], vals, width=width, label=f"HR@{k}")
    ax.set_xticks([x + width * (len(ks) - 1) / 2 for x in xs])
    ax.set_xticklabels(models, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("hit rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title("Hit rate by model and cutoff")
    fig.tight_layout()
    hr_path = out / f"{prefix}_hit_rate.png"
    fig.savefig(hr_path, dpi=120)
    plt.close(fig)
    written.append(hr_path)

    fig, ax = plt.subplots(figsize=(max(6.0, 1.3 * len(models)), 3.5))
    ax.bar(range(len(models)), [r.coverage for r in reports], color="#4878a8")
    ax.set_xticks(range(len(models)))
    ax.set_xticklabels(models, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("catalog coverage")
    ax.set_ylim(0, 1)
    ax.set_title(f"Coverage of top-{max(ks)} lists")
    fig.tight_layout()
    cov_path = out / f"{prefix}_coverage.png"
    fig.savefig(cov_path, dpi=120)
    plt.close(fig)
    written.append(cov_path)
    return written
