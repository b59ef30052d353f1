"""Figure rendering for training curves and benchmark reports (files only)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curves(history: dict, out_png, title: str = "training losses") -> str:
    """history maps loss name -> per-iteration values."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, values in sorted(history.items()):
        if len(values) == 0:
            continue
        ax.plot(range(1, len(values) + 1), values, label=name, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if history:
        ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return str(out_png)


def plot_metric_distributions(reports, out_png) -> str:
    """Boxplots of per-pair dice / RMSE(x) / RMSE(phi) / time per method."""
    if isinstance(reports, dict):
        reports = [reports]
    metrics = ["dice", "rmse_x", "rmse_phi_mm", "time_s"]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 4))
    labels = [f"{r['method']}\n{r['motion']}" for r in reports]
    for ax, metric in zip(axes, metrics):
        data = [[row[metric] for row in r["rows"]] for r in reports]
        data = [d if d else [float("nan")] for d in data]
        ax.boxplot(data, tick_labels=labels)
        ax.set_title(metric)
        ax.grid(alpha=0.3)
        ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return str(out_png)
