"""Figure rendering for experiment reports.

All plots go through the Agg backend straight to PNG files next to the
delimited report output. Rendering is deterministic: fixed dpi, fixed layout,
and no version or timestamp metadata in the files, so reruns of an unchanged
report reproduce the images byte for byte.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

matplotlib.rcParams.update({
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.axisbelow": True,
})

# stripping the Software tag keeps PNG bytes identical across reruns
_PNG_META = {"metadata": {"Software": None}}


def _finish(fig, path):
    fig.savefig(path, **_PNG_META)
    plt.close(fig)


def save_metrics_by_mode(report: dict, path) -> None:
    """Grouped bars: one group per attack mode, one bar per method, std whiskers."""
    modes = report["modes"]
    methods = sorted(report["results"])
    x = np.arange(len(modes))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(modes), 3.2))
    for k, method in enumerate(methods):
        means = [report["results"][method][m]["mean"] for m in modes]
        stds = [report["results"][method][m]["std"] for m in modes]
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, means, width,
               yerr=stds, capsize=3, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(modes, rotation=20, ha="right")
    ax.set_ylabel(report.get("metric", "metric"))
    ax.set_title(f"{report.get('task', '')}: metric by attack mode")
    ax.legend()
    fig.tight_layout()
    _finish(fig, path)


def save_deferral_shares(report: dict, path) -> None:
    """Stacked per-agent deferral shares, one panel per method."""
    modes = report["modes"]
    methods = sorted(report["results"])
    fig, axes = plt.subplots(1, len(methods), figsize=(1.0 + 2.4 * len(methods), 3.2),
                             sharey=True, squeeze=False)
    for ax, method in zip(axes[0], methods):
        shares = np.array([report["results"][method][m]["deferral_shares"]["mean"]
                           for m in modes])
        bottom = np.zeros(len(modes))
        for j in range(shares.shape[1]):
            label = "model" if j == 0 else f"expert {j}"
            ax.bar(range(len(modes)), shares[:, j], bottom=bottom, label=label)
            bottom += shares[:, j]
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=20, ha="right")
        ax.set_title(method)
        ax.set_ylim(0, 1)
    axes[0][0].set_ylabel("deferral share")
    axes[0][-1].legend(fontsize=7)
    fig.suptitle(f"{report.get('task', '')}: routing under attack", y=1.0)
    fig.tight_layout()
    _finish(fig, path)


def save_training_curves(histories: dict, path) -> None:
    """Loss and validation-risk curves; histories maps label -> EpochRow list."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for label, rows in sorted(histories.items()):
        epochs = [r.epoch for r in rows]
        ax.plot(epochs, [r.train_loss for r in rows], label=f"{label} train")
        ax.plot(epochs, [r.val_risk for r in rows], linestyle="--",
                label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("surrogate risk")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _finish(fig, path)
