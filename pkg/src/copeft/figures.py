"""Report figures rendered alongside the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricsReport


def _by_method(reports: list[MetricsReport]) -> dict[str, list[MetricsReport]]:
    grouped: dict[str, list[MetricsReport]] = {}
    for r in reports:
        grouped.setdefault(r.method, []).append(r)
    return grouped


def render_report_figures(reports: list[MetricsReport], out_dir) -> list[Path]:
    """Write a per-method AP bar chart and a params-vs-AP scatter as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    grouped = _by_method(reports)
    if not grouped:
        return written
    methods = list(grouped)
    ap50 = [float(np.median([r.ap50 for r in grouped[m]])) for m in methods]
    ap70 = [float(np.median([r.ap70 for r in grouped[m]])) for m in methods]

    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(methods)), 4.0))
    x = np.arange(len(methods))
    ax.bar(x - 0.2, ap50, width=0.4, label="AP@50")
    ax.bar(x + 0.2, ap70, width=0.4, label="AP@70")
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("median AP")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    path = out_dir / "ap_by_method.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for m in methods:
        trainable = max(1, grouped[m][0].params_trainable)
        ax.scatter(trainable, float(np.median([r.ap50 for r in grouped[m]])), label=m)
    ax.set_xscale("log")
    ax.set_xlabel("trainable parameters")
    ax.set_ylabel("median AP@50")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "params_vs_ap.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
