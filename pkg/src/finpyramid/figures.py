"""Matplotlib renderings of the report tables.

The report command writes these PNGs next to its CSV/markdown output.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .chain import LEVEL_LABELS, PyramidLevel


def save_accuracy_by_level(
    model_rows: Sequence[Mapping[str, Any]], path: str | Path
) -> Path:
    """One line per model across the six capability levels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = range(len(LEVEL_LABELS))
    for row in model_rows:
        ys = [row.get(label) for label in LEVEL_LABELS]
        ax.plot(x, [y if y is not None else float("nan") for y in ys],
                marker="o", label=str(row.get("Model", "?")))
    ax.set_xticks(list(x))
    ax.set_xticklabels(LEVEL_LABELS)
    ax.set_xlabel("capability level")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    if model_rows:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_error_proportions(
    proportions: Mapping[PyramidLevel, float], path: str | Path
) -> Path:
    """Bar chart of first-failure shares per capability level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = [proportions.get(level, 0.0) for level in PyramidLevel]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(LEVEL_LABELS, values, color="#c0504d")
    ax.set_xlabel("first failing capability level")
    ax.set_ylabel("error proportion")
    ax.set_ylim(0, 1)
    for i, value in enumerate(values):
        if value:
            ax.text(i, value, f"{value:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_level_counts(stats: Mapping[str, Any], path: str | Path) -> Path:
    """Bar chart of sample counts per level from a dataset stats summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    counts = stats.get("samples_by_level", {})
    values = [counts.get(label, 0) for label in LEVEL_LABELS]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(LEVEL_LABELS, values, color="#4f81bd")
    ax.set_xlabel("capability level")
    ax.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
