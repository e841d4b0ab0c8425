"""SVG figures for explanations and flipping curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so reruns write identical files
STYLE = {
    "svg.hashsalt": "covxplain",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    return path


def _labels(names, d):
    return list(names) if names is not None else [f"x{i}" for i in range(d)]


def matrix_svg(R, path, names=None, title=None) -> Path:
    """Feature-pair relevance matrix on a symmetric red/blue scale."""
    R = np.asarray(R, dtype=np.float64)
    d = R.shape[0]
    labels = _labels(names, d)
    with plt.rc_context(STYLE):
        size = min(2.5 + 0.35 * d, 12)
        fig, ax = plt.subplots(figsize=(size, size))
        vmax = float(np.max(np.abs(R))) or 1.0
        im = ax.imshow(R, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_xticks(range(d), labels, rotation=90)
        ax.set_yticks(range(d), labels)
        fig.colorbar(im, ax=ax, shrink=0.8)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def bars_svg(scores, path, names=None, title=None) -> Path:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _labels(names, scores.shape[0])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(scores) + 1.5), 2.8))
        colors = np.where(scores >= 0, "#c0392b", "#2e6da4")
        ax.bar(range(len(scores)), scores, color=colors)
        ax.axhline(0.0, color="black", lw=0.6)
        ax.set_xticks(range(len(scores)), labels, rotation=90)
        ax.set_ylabel("relevance")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def flipping_curves_svg(curves: dict, path, title=None) -> Path:
    """One mean flipping curve per method; ``curves`` maps name -> (fractions, values)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for name, (fractions, values) in curves.items():
            ax.plot(fractions, values, marker=".", lw=1.2, label=name)
        ax.set_xlabel("fraction of features flipped")
        ax.set_ylabel("normalized $s^2$")
        ax.set_xlim(0, 1)
        ax.legend(fontsize=7, frameon=False, ncol=2)
        if title:
            ax.set_title(title)
        return _save(fig, path)
