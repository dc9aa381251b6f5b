"""Figure rendering for run reports (matplotlib, file output only)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("png", "svg")


def _save(fig, stem: Path, formats: Sequence[str]) -> list:
    paths = []
    for fmt in formats:
        if fmt not in FORMATS:
            raise ValueError(f"unsupported figure format {fmt!r}")
        path = stem.with_suffix("." + fmt)
        # fixed metadata keeps repeated renders byte-identical
        meta = {"Date": None} if fmt == "svg" else {"Software": None}
        fig.savefig(path, dpi=120, metadata=meta)
        paths.append(path)
    plt.close(fig)
    return paths


def plot_pr_curves(curves: Mapping[str, tuple], stem, formats=("png",)) -> list:
    """``curves``: label -> (precision, recall). Writes ``stem.<fmt>``."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, (p, r) in curves.items():
        ax.plot(r, p, lw=1.5, label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(stem), formats)


def plot_losses(rows: Sequence[Mapping], stem, columns=("total_generator", "bce_fused",
                                                         "adv_generator", "adv_discriminator", "edge"),
                formats=("png",), smooth: int = 1) -> list:
    """Loss history against step; ``smooth`` > 1 applies a trailing moving average."""
    steps = np.array([float(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for c in columns:
        if not rows or c not in rows[0]:
            continue
        y = np.array([float(r[c]) for r in rows])
        if not np.any(y):
            continue
        if smooth > 1 and y.size >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1:]
        else:
            x = steps
        ax.plot(x, y, lw=1.2, label=c)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(stem), formats)
