"""Rendered report figures: hydrographs, score curves, attention maps.

Everything draws through the Agg backend straight to PNG files, so the
report path works on headless machines. Each function returns the
path(s) it wrote.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InvalidInputError
from .evaluation import AttentionSummary, ForecastFrame, temporal_distribution


def plot_history(history: list, path) -> str:
    """Training and validation loss per epoch on a log scale."""
    if not history:
        raise InvalidInputError("empty training history")
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train")
    ax.plot(epochs, [row["val_loss"] for row in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean squared error")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_hydrographs(frame: ForecastFrame, observed, station_ids,
                     out_dir) -> list[str]:
    """One predicted-versus-observed series plot per station."""
    observed = np.asarray(observed, dtype=np.float64)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, sid in enumerate(station_ids):
        fig, ax = plt.subplots(figsize=(9, 4))
        ax.plot(frame.timesteps, observed[i], label="observed", lw=1.2)
        ax.plot(frame.timesteps, frame.values[i], label="predicted",
                lw=1.0, alpha=0.85)
        ax.set_xlabel("timestep")
        ax.set_ylabel("discharge (m³/s)")
        ax.set_title(f"station {sid}")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"hydrograph_{sid}.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_lead_curve(rows: list, path) -> str:
    """Skill as a function of forecast lead, from lead-grouped rows."""
    leads = [(int(r["lead"]), r["nse"], r["kge"]) for r in rows
             if r["group"] == "lead"]
    if not leads:
        raise InvalidInputError("no lead-grouped rows to plot")
    leads.sort()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([l for l, _, _ in leads], [n for _, n, _ in leads],
            marker="o", label="NSE")
    ax.plot([l for l, _, _ in leads], [k for _, _, k in leads],
            marker="s", label="KGE")
    ax.set_xlabel("lead (steps)")
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_spatial_attention(summary: AttentionSummary, station_ids,
                           out_dir) -> list[str]:
    """Heatmap of source-to-destination weights, one file per head."""
    os.makedirs(out_dir, exist_ok=True)
    ids = [str(s) for s in station_ids]
    paths = []
    for h in range(summary.spatial.shape[0]):
        fig, ax = plt.subplots(figsize=(5, 4.2))
        im = ax.imshow(summary.spatial[h], vmin=0.0, vmax=1.0,
                       cmap="viridis")
        ax.set_xticks(range(len(ids)), ids, rotation=45, ha="right")
        ax.set_yticks(range(len(ids)), ids)
        ax.set_xlabel("source station")
        ax.set_ylabel("destination station")
        ax.set_title(f"head {h}")
        fig.colorbar(im, ax=ax, label="attention weight")
        fig.tight_layout()
        path = os.path.join(out_dir, f"spatial_head{h}.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_temporal_attention(summary: AttentionSummary, graph, out_dir,
                            stations=None) -> list[str]:
    """Bar chart of the newest query's attention over past steps."""
    os.makedirs(out_dir, exist_ok=True)
    ids = list(graph.station_ids)
    if stations is None:
        stations = ids
    unknown = [s for s in stations if s not in ids]
    if unknown:
        raise InvalidInputError(f"unknown stations {unknown}")
    paths = []
    for sid in stations:
        node = graph.targets[ids.index(sid)]
        dist = temporal_distribution(summary, node)
        back = np.arange(dist.size)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(back, dist[::-1], width=0.85)
        ax.set_xlabel("steps back from the newest input")
        ax.set_ylabel("attention weight")
        ax.set_title(f"station {sid}")
        fig.tight_layout()
        path = os.path.join(out_dir, f"temporal_{sid}.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths
