"""Report figures rendered straight to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(curve: Sequence[float], path, ref: float | None = None) -> Path:
    """Per-epoch reconstruction loss on a log axis; ``ref`` draws the uniform-guess level."""
    fig, ax = _figure()
    ax.plot(range(len(curve)), curve, lw=1.2, color="C0")
    if ref is not None:
        ax.axhline(ref, ls="--", lw=0.8, color="0.5", label="uniform guess")
        ax.legend(frameon=False)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction NLL")
    return _save(fig, path)


def search_trace(entries, path) -> Path:
    """Score of every scored candidate in search order, with the running best."""
    fig, ax = _figure(5.5, 3.0)
    vs = [e.v for e in entries]
    best, run = [], float("-inf")
    for v in vs:
        run = max(run, v)
        best.append(run)
    ax.scatter(range(len(vs)), vs, s=3, alpha=0.4, color="C0", label="candidate")
    ax.plot(range(len(vs)), best, color="C3", lw=1.2, label="best so far")
    ax.set_xlabel("log entry")
    ax.set_ylabel("score v")
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def baseline_comparison(best_v: float, best_size: int, all_v: float, n_features: int,
                        random_vs: Sequence[float], path) -> Path:
    """Best subset against the all-features model and size-matched random subsets."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.0, 2.8))
    with plt.rc_context(STYLE):
        ax1.boxplot([list(random_vs)], positions=[2], widths=0.5)
        ax1.bar([0, 1], [best_v, all_v], color=["C3", "0.6"], width=0.6)
        ax1.set_xticks([0, 1, 2], ["selected", "all", "random"])
        ax1.set_ylabel("5-fold score")
        lo = min([best_v, all_v, *random_vs])
        ax1.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax2.bar([0, 1], [best_size, n_features], color=["C3", "0.6"], width=0.6)
        ax2.set_xticks([0, 1], ["selected", "all"])
        ax2.set_ylabel("features")
    return _save(fig, path)
