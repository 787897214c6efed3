"""Calibration diagram rendering from report bin tables.

Renders to files only (Agg backend); the metric code itself stays free of
any plotting so the diagrams can also be redrawn externally from the
exported bin tables.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import CalibrationBins, MetricReport


def _bar_alphas(counts: np.ndarray) -> np.ndarray:
    total = counts.max()
    if total <= 0:
        return np.zeros_like(counts)
    return 0.15 + 0.85 * counts / total


def _diagram(ax, bins: CalibrationBins, xlabel: str) -> None:
    width = 1.0 / bins.m_bins
    centers = (bins.edges[:-1] + bins.edges[1:]) / 2.0
    alphas = _bar_alphas(bins.counts)
    for c, f, a, n in zip(centers, bins.freq, alphas, bins.counts):
        if n > 0:
            ax.bar(c, f, width=width, color="tab:blue", alpha=float(a), edgecolor="black", linewidth=0.5)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1.0)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("empirical frequency")
    ax.set_aspect("equal")


def calibration_diagram(bins: CalibrationBins, path, title: str | None = None) -> None:
    """Reliability diagram of the point predictions (bar shade ~ bin size)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    _diagram(ax, bins, "predicted probability")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def bound_diagram(upper_bins: CalibrationBins, path, title: str | None = None) -> None:
    """Diagram of the upper probability bounds; calibrated bars sit below the diagonal."""
    fig, ax = plt.subplots(figsize=(4, 4))
    _diagram(ax, upper_bins, "predicted upper bound")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def report_figures(report: MetricReport, out_dir, stem: str) -> list[str]:
    """Render both calibration diagrams of a report; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    pred_path = os.path.join(out_dir, f"{stem}-calibration.png")
    bound_path = os.path.join(out_dir, f"{stem}-bounds.png")
    calibration_diagram(report.bins, pred_path, title=f"predictions (ece={report.ece:.4f})")
    bound_diagram(report.upper_bins, bound_path, title=f"upper bounds (ebce={report.ebce:.4f})")
    return [pred_path, bound_path]
