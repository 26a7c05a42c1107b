"""Figure rendering for run reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_convergence(metrics, path):
    """Per-layer loss curves plus test accuracy over epochs."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    by_layer = {}
    for epoch, layer, loss in metrics.layer_loss:
        by_layer.setdefault(layer, []).append((epoch, loss))
    for layer, rows in sorted(by_layer.items(), key=lambda kv: str(kv[0])):
        rows.sort()
        ax1.plot([r[0] for r in rows], [r[1] for r in rows], label=f"layer {layer}")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean loss")
    ax1.legend(fontsize=7)
    if metrics.test_acc:
        epochs = [e for e, _ in metrics.test_acc]
        errs = [100.0 * (1.0 - a) for _, a in metrics.test_acc]
        ax2.plot(epochs, errs, marker=".")
        ax2.set_yscale("log")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("test error (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_cost_bars(reports: dict, path):
    """Dominant-term mult/memory bars per algorithm, log scale."""
    algos = list(reports)
    mults = [reports[a]["mults"] for a in algos]
    mems = [reports[a]["mem_words"] for a in algos]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, values, title in ((ax1, mults, "multiplications"),
                              (ax2, mems, "memory words")):
        ax.bar(range(len(algos)), values)
        ax.set_xticks(range(len(algos)))
        ax.set_xticklabels(algos, rotation=20, fontsize=8)
        ax.set_yscale("log")
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_sweep(rows, path):
    """Accuracy spread across seeds for one configuration."""
    fig, ax = plt.subplots(figsize=(4, 3.2))
    accs = [r["accuracy"] for r in rows]
    ax.boxplot([accs], tick_labels=["runs"])
    ax.scatter([1] * len(accs), accs, s=12, alpha=0.7)
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
