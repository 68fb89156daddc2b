"""Figure rendering for run reports: loss curves, latency bars, and sweep
heatmaps.  Files are written next to the TSV reports; no interactive backend
is ever required."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curve(metrics, path):
    """Training loss and validation accuracy over epochs."""
    fig, ax1 = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(metrics.train_loss) + 1)
    ax1.plot(epochs, metrics.train_loss, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, metrics.val_acc, color="tab:orange", label="val accuracy")
    ax2.set_ylabel("val accuracy", color="tab:orange")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def bench_bars(report, path):
    """Median kernel latency per configuration with p10/p90 whiskers."""
    names = [r.name for r in report.rows]
    med = np.array([r.median_ns for r in report.rows]) / 1e6
    lo = med - np.array([r.p10_ns for r in report.rows]) / 1e6
    hi = np.array([r.p90_ns for r in report.rows]) / 1e6 - med
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, med, yerr=[np.maximum(lo, 0), np.maximum(hi, 0)],
           capsize=4, color="tab:green")
    ax.set_ylabel("median latency (ms)")
    ax.set_title(f"N={report.n} d={report.d} deg~{report.deg}")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sweep_heatmap(cells, path):
    """Mean test accuracy over the (k, r) grid."""
    ks = sorted({c.k for c in cells})
    rs = sorted({c.r for c in cells})
    grid = np.full((len(rs), len(ks)), np.nan)
    for c in cells:
        grid[rs.index(c.r), ks.index(c.k)] = c.mean_acc
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(ks)), [str(k) for k in ks])
    ax.set_yticks(range(len(rs)), [str(r) for r in rs])
    ax.set_xlabel("k (bases)")
    ax.set_ylabel("r (rank)")
    for (i, j), v in np.ndenumerate(grid):
        if np.isfinite(v):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", color="white")
    fig.colorbar(im, ax=ax, label="mean test accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
