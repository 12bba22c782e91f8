"""Static figures and CSV tables from a saved EvalReport."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import METRICS, EvalReport  # noqa: E402

SLOT_FIELDS = ("id", "task_kind", "category", "index", "object", "affordance", "penalized") + METRICS


def slot_rows(report: EvalReport) -> list[dict]:
    rows = []
    for rec in report.per_sample:
        for s in rec["slots"]:
            row = {"id": rec["id"], "task_kind": rec["task_kind"], "category": rec["category"]}
            row.update({k: s.get(k) for k in SLOT_FIELDS if k in s})
            rows.append(row)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_slot_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SLOT_FIELDS)
        w.writeheader()
        for row in slot_rows(report):
            w.writerow({k: _fmt(row.get(k)) for k in SLOT_FIELDS})
    return path


def write_summary_csv(report: EvalReport, path: str | Path) -> Path:
    """One row per (group kind, group) with the four metric means."""
    path = Path(path)
    groups = [("aggregate", "all", report.aggregate)]
    for kind, table in (("affordance", report.per_affordance), ("slot", report.per_slot),
                        ("task_kind", report.per_task_kind), ("split", report.per_split)):
        groups += [(kind, name, vals) for name, vals in table.items()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "name", *METRICS])
        for kind, name, vals in groups:
            w.writerow([kind, name, *(_fmt(vals.get(m)) for m in METRICS)])
    return path


def plot_distributions(report: EvalReport, path: str | Path, bins: int = 20) -> Path:
    """2x2 histograms of per-slot mIoU / AUC / SIM / MAE."""
    rows = slot_rows(report)
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, name in zip(axes.ravel(), METRICS):
        vals = np.array([r[name] for r in rows if r.get(name) is not None], dtype=float)
        if vals.size:
            ax.hist(vals, bins=bins, range=(0.0, 1.0), color="tab:blue", alpha=0.8, edgecolor="white")
            ax.axvline(vals.mean(), color="tab:red", lw=1.2, ls="--", label=f"mean {vals.mean():.3f}")
            ax.legend(fontsize=8, frameon=False)
        else:
            ax.text(0.5, 0.5, "no values", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlim(0, 1)
        ax.set_title(f"{name} (n={vals.size})", fontsize=10)
        ax.set_xlabel(name)
        ax.set_ylabel("slots")
    fig.suptitle(f"{len(report.per_sample)} samples, routing accuracy {report.routing_accuracy:.3f}", fontsize=11)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(report: EvalReport, plot_path: str | Path) -> dict[str, Path]:
    """Write the figure plus ``<stem>_slots.csv`` and ``<stem>_summary.csv`` next to it."""
    plot_path = Path(plot_path)
    plot_path.parent.mkdir(parents=True, exist_ok=True)
    stem = plot_path.with_suffix("")
    return {
        "plot": plot_distributions(report, plot_path),
        "slots": write_slot_csv(report, f"{stem}_slots.csv"),
        "summary": write_summary_csv(report, f"{stem}_summary.csv"),
    }
