"""PNG figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_training_curves(report, path) -> str:
    """Loss components and validation MRR per epoch."""
    epochs = [e.epoch for e in report.epochs]
    select = report.select_metric.split("@")[-1]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax_loss.plot(epochs, [e.total for e in report.epochs], label="total", color="k")
        ax_loss.plot(epochs, [(1 - e.delta) * e.rank for e in report.epochs], label="weighted rank", ls="--")
        ax_loss.plot(epochs, [e.delta * e.move for e in report.epochs], label="weighted move", ls=":")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_loss.legend(frameon=False)
        ax_val.plot(epochs, [e.validation[select]["mrr"] for e in report.epochs], color="C2")
        ax_val.axvline(report.best_epoch, color="0.6", lw=0.8)
        ax_val.set_xlabel("epoch")
        ax_val.set_ylabel(f"validation MRR@{select}")
        fig.suptitle(f"{report.variant}, seed {report.seed}")
        fig.tight_layout()
        return _save(fig, path)


def plot_attention_heatmap(row_ids, col_ids, weights, path, title: str = "") -> str:
    weights = np.asarray(weights)
    with plt.rc_context(STYLE):
        size = (max(3.0, 0.35 * len(col_ids) + 1.5), max(2.5, 0.3 * len(row_ids) + 1.0))
        fig, ax = plt.subplots(figsize=size)
        im = ax.imshow(weights, cmap="viridis", vmin=0.0, vmax=max(float(weights.max()), 1e-12),
                       aspect="auto")
        ax.set_xticks(range(len(col_ids)))
        ax.set_xticklabels(col_ids, rotation=90)
        ax.set_yticks(range(len(row_ids)))
        ax.set_yticklabels(row_ids)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        return _save(fig, path)


def plot_attention_distribution(rows, path) -> str:
    """Histogram of attention weights per level (temporal, intra, inter)."""
    by_level = {}
    for _, level, _, _, _, w in rows:
        by_level.setdefault(level, []).append(w)
    levels = sorted(by_level)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(levels), 1), figsize=(3.2 * max(len(levels), 1), 2.8),
                                 squeeze=False)
        for ax, level in zip(axes[0], levels):
            ws = np.asarray(by_level[level])
            ax.hist(ws, bins=20, range=(0.0, 1.0), color="C0")
            ax.set_title(f"{level}: var {ws.var():.2e}")
            ax.set_xlabel("weight")
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(rows, path, metric: str = "test_mrr@5") -> str:
    """One panel per swept axis; other axes are averaged out."""
    axes_names = [a for a in ("weeks", "hidden_dim", "delta") if len({r[a] for r in rows}) > 1]
    axes_names = axes_names or ["weeks"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(axes_names), figsize=(3.2 * len(axes_names), 2.8), squeeze=False)
        for ax, name in zip(axes[0], axes_names):
            xs = sorted({r[name] for r in rows})
            ys = [np.mean([r[metric] for r in rows if r[name] == x]) for x in xs]
            ax.plot(range(len(xs)), ys, marker="o")
            ax.set_xticks(range(len(xs)))
            ax.set_xticklabels([str(x) for x in xs])
            ax.set_xlabel(name)
            ax.set_ylabel(metric)
        fig.tight_layout()
        return _save(fig, path)


def plot_recommendation(stock_ids, pred_returns, path, title: str = "") -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.4 * len(stock_ids) + 1.0), 2.8))
        ax.bar(range(len(stock_ids)), pred_returns, color="C1")
        ax.set_xticks(range(len(stock_ids)))
        ax.set_xticklabels(stock_ids, rotation=90)
        ax.set_ylabel("predicted return ratio")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(result: dict, k_list, path) -> str:
    """Grouped bars of MRR@K and Precision@K from an evaluation report."""
    x = np.arange(len(k_list))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        ax.bar(x - 0.2, [result[str(k)]["mrr"] for k in k_list], 0.4, label="MRR")
        ax.bar(x + 0.2, [result[str(k)]["precision"] for k in k_list], 0.4, label="Precision")
        ax.set_xticks(x)
        ax.set_xticklabels([f"K={k}" for k in k_list])
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        ax.set_title(f"acc {result['acc']:.3f} over {result['n_days']} days")
        fig.tight_layout()
        return _save(fig, path)
