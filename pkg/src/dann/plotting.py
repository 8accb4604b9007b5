"""Matplotlib renderings of the CSV artifacts (training curves, PCA scatter).

The CSV files are the data of record; these figures are a convenience.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .training import EpochMetrics  # noqa: E402

# strip timestamps and salt ids so repeated renders of the same data match
_METADATA = {".svg": {"Date": None}, ".png": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context({"svg.hashsalt": "dann"}):
        fig.savefig(path, metadata=_METADATA.get(path.suffix.lower()))
    plt.close(fig)
    return path


def plot_training_curves(metrics: Sequence[EpochMetrics], path) -> Path:
    """Losses (left) and dev/domain UAR (right) against epoch."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_l, ax_u) = plt.subplots(1, 2, figsize=(10, 4))
    ax_l.plot(epochs, [m.emotion_loss for m in metrics], label="emotion loss")
    ax_l.plot(epochs, [m.language_loss for m in metrics], label="language loss")
    ax_l.plot(epochs, [m.total_loss for m in metrics], label="total loss", linestyle="--")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    ax_u.plot(epochs, [m.dev_uar for m in metrics], label="dev emotion UAR")
    ax_u.plot(epochs, [m.domain_uar for m in metrics], label="language UAR")
    ax_u.axhline(0.5, color="grey", linewidth=0.8, linestyle=":")
    ax_u.set_xlabel("epoch")
    ax_u.set_ylabel("UAR")
    ax_u.set_ylim(0.0, 1.0)
    ax_u.legend()
    for ax in (ax_l, ax_u):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    fig.tight_layout()
    return _save(fig, path)


def plot_pca(coords, domains: Sequence[str], labels: Sequence[int | None], path,
             explained: float | None = None) -> Path:
    """Scatter of the first two PCs; colour = domain, marker = emotion class."""
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = {"source": "tab:blue", "target": "tab:orange"}
    markers = {0: "o", 1: "^", None: "x"}
    for dom in sorted(set(domains)):
        for lab in (0, 1, None):
            idx = [i for i, (d, y) in enumerate(zip(domains, labels))
                   if d == dom and (y if y is None or y >= 0 else None) == lab]
            if not idx:
                continue
            tag = "unlabelled" if lab is None else f"class {lab}"
            ax.scatter(coords[idx, 0], coords[idx, 1], s=12, alpha=0.7, c=colors.get(dom, "tab:green"),
                       marker=markers[lab], label=f"{dom}, {tag}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if explained is not None:
        ax.set_title(f"explained variance {explained:.1%}")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)
