"""Figure builders for the four plot kinds.

Every function takes input paths plus an output path and writes one image
deterministically; inputs are never modified.  The x-axis for anything
indexed by PDE solves is logarithmic, since methods of interest differ by
orders of magnitude in solve count.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from pdepolicy_viz import io

FIGSIZE = (7.0, 4.5)
DPI = 130


def _log_solves(ax):
    ax.set_xscale("symlog", linthresh=1.0)
    ax.set_xlabel("cumulative PDE solves")


def _finish(fig, out_path):
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def loss_curve(csv_paths, out_path, title="validation objective during training"):
    """One labeled series per run: mean validation objective vs solves."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in csv_paths:
        rows = io.read_validation(path)
        solves = [r["pde_solves"] for r in rows]
        means = [r["mean_val_J"] for r in rows]
        ax.plot(solves, means, marker="o", markersize=3, label=io.run_label(path))
    _log_solves(ax)
    ax.set_ylabel("mean validation objective")
    ax.set_title(title)
    if csv_paths:
        ax.legend()
    return _finish(fig, out_path)


def solves_bar(csv_paths, thresholds, out_path,
               title="PDE solves to reach target objective"):
    """Grouped bars: first solve count reaching each threshold, per run."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    width = 0.8 / max(len(thresholds), 1)
    reached_any = []
    for t_idx, threshold in enumerate(thresholds):
        xs, heights, labels = [], [], []
        for r_idx, path in enumerate(csv_paths):
            rows = io.read_validation(path)
            crossing = next(
                (r["pde_solves"] for r in rows if r["mean_val_J"] <= threshold), None
            )
            xs.append(r_idx + t_idx * width)
            heights.append(np.nan if crossing is None else max(crossing, 0.5))
            labels.append(io.run_label(path))
        bars = ax.bar(xs, np.nan_to_num(heights, nan=0.0), width=width,
                      label=f"J ≤ {threshold:g}")
        for bar, h in zip(bars, heights):
            if np.isnan(h):
                ax.text(bar.get_x() + bar.get_width() / 2, 0.6, "not reached",
                        rotation=90, ha="center", va="bottom", fontsize=7)
        reached_any.append(labels)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(csv_paths))])
    ax.set_xticklabels(reached_any[0] if reached_any else [], rotation=15, fontsize=8)
    ax.set_yscale("symlog", linthresh=1.0)
    ax.set_ylabel("PDE solves to threshold")
    ax.set_title(title)
    if thresholds:
        ax.legend()
    return _finish(fig, out_path)


def suboptimality(csv_paths, baseline_csv, out_path,
                  title="suboptimality vs baseline"):
    """Gap between each run's validation mean and the baseline mean."""
    baseline_mean = io.read_baseline_mean(baseline_csv)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in csv_paths:
        rows = io.read_validation(path)
        solves = [r["pde_solves"] for r in rows]
        gap = [r["mean_val_J"] - baseline_mean for r in rows]
        ax.plot(solves, gap, marker="o", markersize=3, label=io.run_label(path))
    ax.axhline(0.0, color="k", linewidth=0.8, linestyle=":")
    _log_solves(ax)
    ax.set_ylabel("mean objective minus baseline")
    ax.set_title(title)
    if csv_paths:
        ax.legend()
    return _finish(fig, out_path)


def episode_frames(snapshot_path, out_path, episode_csv=None, max_frames=8,
                   title="concentration evolution"):
    """Heatmap strip of the concentration field over an episode."""
    n, frames = io.read_snapshots(snapshot_path)
    count = min(max_frames, len(frames))
    index = np.linspace(0, len(frames) - 1, count).round().astype(int)
    episode = io.read_episode(episode_csv) if episode_csv else None
    scale = np.abs(frames).max() or 1.0
    fig, axes = plt.subplots(1, count, figsize=(1.8 * count, 2.4))
    if count == 1:
        axes = [axes]
    for ax, k in zip(axes, index):
        # image rows are x2 (upward), columns x1 (rightward)
        ax.imshow(frames[k].T, origin="lower", cmap="coolwarm",
                  vmin=-scale, vmax=scale, extent=(0, 1, 0, 1))
        ax.axvline(0.75, color="k", linestyle="--", linewidth=0.7)
        if episode is not None and k < len(episode["alpha"]):
            ax.plot([0.6], [episode["alpha"][k]], marker="v", color="b", markersize=5)
        ax.set_title(f"frame {k}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    return _finish(fig, out_path)
