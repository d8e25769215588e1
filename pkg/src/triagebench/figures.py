"""Render report figures to files next to the delimited outputs.

Every figure is derived from the same data as the corresponding CSV/JSON
artifact, uses the Agg backend, and is pixel-deterministic so manifests
can hash the image files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .counterfactual import RACE_ORDER, SEX_ORDER, GroupMeans

_LEVELS = (1, 2, 3, 4, 5)
_DPI = 120


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_level_distribution(
    gold: Sequence[float],
    strategy_dists: Sequence[tuple[str, Sequence[float]]],
    path: str | Path,
) -> None:
    """Grouped bars comparing gold vs predicted acuity proportions."""
    series = [("gold", gold)] + list(strategy_dists)
    width = 0.8 / len(series)
    x = np.arange(len(_LEVELS), dtype=float)

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (label, dist) in enumerate(series):
        ax.bar(x + i * width, list(dist), width=width, label=label)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels([str(level) for level in _LEVELS])
    ax.set_xlabel("acuity level")
    ax.set_ylabel("proportion")
    ax.set_title("Acuity level distribution")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_shots_sweep(
    rows: Sequence[tuple[str, int, float, float]],
    path: str | Path,
) -> None:
    """QWK and accuracy versus shot count, one line per strategy."""
    by_strategy: dict[str, list[tuple[int, float, float]]] = {}
    for strategy, shots, qwk, acc in rows:
        by_strategy.setdefault(strategy, []).append((shots, qwk, acc))

    fig, (ax_qwk, ax_acc) = plt.subplots(1, 2, figsize=(9, 4), sharex=True)
    for strategy in sorted(by_strategy):
        points = sorted(by_strategy[strategy])
        shots = [p[0] for p in points]
        ax_qwk.plot(shots, [p[1] for p in points], marker="o", label=strategy)
        ax_acc.plot(shots, [p[2] for p in points], marker="o", label=strategy)
    ax_qwk.set_xlabel("shots")
    ax_qwk.set_ylabel("QWK")
    ax_acc.set_xlabel("shots")
    ax_acc.set_ylabel("accuracy")
    ax_qwk.legend(fontsize=8)
    fig.suptitle("Few-shot scaling")
    fig.tight_layout()
    _save(fig, path)


def render_audit_heatmap(gm: GroupMeans, label: str, path: str | Path) -> None:
    """2x6 heatmap of mean assigned acuity per sex x race cell."""
    grid = np.full((len(SEX_ORDER), len(RACE_ORDER)), np.nan)
    for i, sex in enumerate(SEX_ORDER):
        for j, race in enumerate(RACE_ORDER):
            mean, _ = gm.cell(sex, race)
            if mean is not None:
                grid[i, j] = mean

    fig, ax = plt.subplots(figsize=(9, 3.2))
    image = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(RACE_ORDER)))
    ax.set_xticklabels([race.label for race in RACE_ORDER], rotation=20, ha="right", fontsize=8)
    ax.set_yticks(range(len(SEX_ORDER)))
    ax.set_yticklabels([sex.value for sex in SEX_ORDER])
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(image, ax=ax, label="mean assigned acuity")
    ax.set_title(f"Counterfactual group means: {label}")
    fig.tight_layout()
    _save(fig, path)
