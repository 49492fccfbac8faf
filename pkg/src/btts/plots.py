"""Matplotlib renderings of the delimited reports (loss curves, sweep
heatmap, shot-size trends). Written next to the CSV outputs by the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import ShotRow
from .training import SweepCell, TrainMetrics


def save_loss_curves(metrics: list[TrainMetrics], path: str | Path) -> None:
    steps = [m.step for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [m.ce for m in metrics], label="cross-entropy", lw=1.2)
    ax.plot(steps, [m.total for m in metrics], label="total", lw=1.2, alpha=0.8)
    ax.plot(steps, [m.bt_sentence for m in metrics], label="bt (sentence)", lw=1.0, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_heatmap(cells: list[SweepCell], path: str | Path) -> None:
    lambdas = sorted({c.lam for c in cells})
    deltas = sorted({c.delta for c in cells})
    grid = np.full((len(lambdas), len(deltas)), np.nan)
    for c in cells:
        grid[lambdas.index(c.lam), deltas.index(c.delta)] = c.probe_acc
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(deltas)), [f"{d:g}" for d in deltas])
    ax.set_yticks(range(len(lambdas)), [f"{l:g}" for l in lambdas])
    ax.set_xlabel("delta (off-diagonal weight)")
    ax.set_ylabel("lambda (contrastive weight)")
    ax.set_title("probe accuracy over the loss-weight grid")
    for i in range(len(lambdas)):
        for j in range(len(deltas)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="probe accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_shot_curves(rows: list[ShotRow], path: str | Path) -> None:
    ordered = sorted(rows, key=lambda r: r.size)
    sizes = [r.size for r in ordered]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(sizes, [r.accuracy for r in ordered], marker="o", label="accuracy")
    ax.plot(sizes, [r.content for r in ordered], marker="s", label="content")
    ax.plot(sizes, [r.g for r in ordered], marker="^", label="g-score")
    ax.set_xlabel("exemplars per side")
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    ax.set_title("shot-size ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
