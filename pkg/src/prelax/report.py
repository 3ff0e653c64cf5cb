"""Run reports: metrics logs rendered to CSV and overview figures.

Everything draws through the Agg backend so reports work in headless
runs; figures land next to the delimited output they illustrate.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .losses import TERM_NAMES

METRIC_COLUMNS = ("epoch", "step", "lr", "tau") + TERM_NAMES + ("total", "residual_norm", "wall_time")


def metrics_to_csv(records: Sequence[dict], path: str | Path) -> Path:
    """Write per-epoch metrics records as CSV with a fixed column order."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            writer.writerow([rec.get(col, "") for col in METRIC_COLUMNS])
    return path


def _epochs(records: Sequence[dict]) -> list[int]:
    return [rec["epoch"] for rec in records]


def render_term_figure(records: Sequence[dict], path: str | Path) -> Path:
    """Loss terms over epochs; only terms active in the run are drawn."""
    path = Path(path)
    epochs = _epochs(records)
    active = [t for t in TERM_NAMES if any(rec.get(t, 0.0) != 0.0 for rec in records)]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for term in active:
        ax.plot(epochs, [rec[term] for rec in records], label=term)
    ax.plot(epochs, [rec["total"] for rec in records], label="total", color="black", linewidth=2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_schedule_figure(records: Sequence[dict], path: str | Path) -> Path:
    """Learning rate and, when present, the moving-average rate."""
    path = Path(path)
    epochs = _epochs(records)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [rec["lr"] for rec in records], label="lr", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate", color="tab:blue")
    ax.grid(True, alpha=0.3)
    taus = [rec.get("tau") for rec in records]
    if any(t is not None for t in taus):
        twin = ax.twinx()
        twin.plot(epochs, taus, label="tau", color="tab:orange")
        twin.set_ylabel("tau", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_residual_figure(records: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    epochs = _epochs(records)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [rec["residual_norm"] for rec in records], color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean residual norm")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run_report(records: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Write the CSV and the three overview figures for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        metrics_to_csv(records, out_dir / "metrics.csv"),
        render_term_figure(records, out_dir / "loss_terms.png"),
        render_schedule_figure(records, out_dir / "schedules.png"),
        render_residual_figure(records, out_dir / "residual_norm.png"),
    ]
    return written


def render_retrieval_grid(
    images: np.ndarray,
    query_ids: Sequence[int],
    neighbor_ids: Sequence[Sequence[int]],
    path: str | Path,
    max_queries: int = 8,
    max_neighbors: int = 15,
) -> Path:
    """Image grid of queries (left column) and their nearest neighbors.

    ``images`` is indexed by id, shape (N, 3, H, W) in [0, 1].
    """
    path = Path(path)
    rows = min(len(query_ids), max_queries)
    cols = 1 + min(max(len(n) for n in neighbor_ids), max_neighbors) if rows else 1
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1), squeeze=False)
    for r in range(rows):
        picks = [query_ids[r]] + list(neighbor_ids[r][: cols - 1])
        for c, ax in enumerate(axes[r]):
            ax.axis("off")
            if c < len(picks):
                ax.imshow(np.transpose(images[int(picks[c])], (1, 2, 0)))
                if r == 0:
                    ax.set_title("query" if c == 0 else str(c), fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
