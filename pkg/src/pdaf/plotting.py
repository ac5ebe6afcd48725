"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_det(points: np.ndarray, eer: float, path, title: str = "") -> Path:
    """DET curve on normal-deviate axes; ``points`` rows are (threshold, FAR, FRR)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        clip = 1e-3
        far = norm.ppf(np.clip(points[:, 1], clip, 1 - clip))
        frr = norm.ppf(np.clip(points[:, 2], clip, 1 - clip))
        ax.plot(far, frr, lw=1.2, color="C0")
        e = norm.ppf(np.clip(eer, clip, 1 - clip))
        ax.plot([e], [e], "o", ms=4, color="C3", label=f"EER {100 * eer:.2f}%")
        ticks = np.array([0.001, 0.01, 0.05, 0.2, 0.5, 0.8])
        ax.set_xticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
        ax.set_yticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
        ax.set_xlabel("false acceptance (%)")
        ax.set_ylabel("false rejection (%)")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", frameon=False)
        return _save(fig, path)


def plot_ablation(rows: Sequence, path, title: str = "Change in EER when masked") -> Path:
    """Bars of ΔEER per masking condition, with the across-model spread if present."""
    rows = [r for r in rows if r.condition != "none"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(rows) + 1.5), 3.0))
        x = np.arange(len(rows))
        deltas = [r.delta for r in rows]
        err = [r.delta_std or 0.0 for r in rows]
        colors = ["C3" if d > 0 else "C0" for d in deltas]
        ax.bar(x, deltas, yerr=err if any(err) else None, color=colors, width=0.7, capsize=2)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x, [r.condition for r in rows], rotation=60, ha="right")
        ax.set_ylabel("ΔEER (points)")
        ax.set_title(title)
        return _save(fig, path)


def plot_training(metrics: Sequence[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ep = [m["epoch"] for m in metrics]
        ax.plot(ep, [m["loss"] for m in metrics], color="C0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax2 = ax.twinx()
        ax2.plot(ep, [m["accuracy"] for m in metrics], color="C1", label="accuracy")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("train accuracy")
        return _save(fig, path)
