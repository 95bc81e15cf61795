"""SVG loss curves and 2-D scatter overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fewstep"  # stable element ids across runs


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def loss_curve_svg(log, path: str | Path, smooth: int = 50) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = log.column("step")
    for name in log.columns[1:]:
        y = log.column(name)
        if smooth > 1 and len(y) > smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1 :]
        else:
            x = steps
        ax.plot(x, y, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def scatter_svg(sets: dict[str, np.ndarray], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, pts in sets.items():
        pts = np.asarray(pts)
        ax.scatter(pts[:, 0], pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts)), s=3, alpha=0.5, label=name)
    ax.set_aspect("equal")
    ax.legend(markerscale=4)
    fig.tight_layout()
    _save(fig, path)
