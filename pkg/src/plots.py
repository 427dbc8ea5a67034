"""Figures for evaluation and feature selection, written as PNG files."""

import logging
import os

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from src.metrics import SparsificationResult  # noqa: E402
from src.regression import SelectionSummary  # noqa: E402

logger = logging.getLogger(__name__)

FIGURE_SIZE = (6.0, 4.0)
DPI = 120


def _save(fig, path: str) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    logger.info("Figure saved: %s", path)
    return path


def plot_sparsification(result: SparsificationResult, path: str, title: str = "") -> str:
    """Oracle and uncertainty sparsification curves with the area between them shaded."""
    fig, ax = plt.subplots(figsize=FIGURE_SIZE)
    ax.plot(result.fractions, result.oracle_curve, "--", color="black", label="oracle (error)")
    ax.plot(result.fractions, result.uncertainty_curve, "-", color="tab:red", label="uncertainty")
    ax.fill_between(result.fractions, result.oracle_curve, result.uncertainty_curve, color="tab:red", alpha=0.15)
    ax.set_xlabel("fraction of pixels removed")
    ax.set_ylabel("MAE of remaining pixels (rescaled)")
    ax.set_title(f"{title}  AUSE = {result.ause:.4f}".strip())
    ax.legend()
    return _save(fig, path)


def plot_selection(summary: SelectionSummary, path: str) -> str:
    """Mean score per elimination step next to mean rounds each feature survived."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(FIGURE_SIZE[0] * 2, FIGURE_SIZE[1]))
    steps = range(len(summary.mean_trajectory))
    left.plot(steps, summary.mean_trajectory, "o-", color="tab:blue")
    left.set_xlabel("features removed")
    left.set_ylabel("mean Pearson")
    left.set_title("backward selection")

    names = list(summary.feature_names)
    right.barh(names, [summary.mean_survival[n] for n in names], color="tab:green")
    right.invert_yaxis()
    right.set_xlabel("mean rounds used")
    right.set_title("feature survival")
    return _save(fig, path)
