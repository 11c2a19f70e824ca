"""Figures written next to the tabular outputs.

The Agg backend is used and PNG metadata is stripped so that identical
inputs give byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def _field(ax, values, coords, title, cmap="viridis", vmin=0.0, vmax=1.0):
    if coords is not None and coords.shape[1] == 2:
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=values, s=12, marker="s",
                        cmap=cmap, vmin=vmin, vmax=vmax, linewidths=0)
        ax.set_aspect("equal")
        ax.figure.colorbar(sc, ax=ax, shrink=0.8)
    else:
        x = np.arange(values.size) if coords is None else coords[:, 0]
        order = np.argsort(x, kind="stable")
        ax.plot(x[order], values[order], lw=1.2)
        ax.set_ylim(vmin - 0.02, vmax + 0.02)
        ax.set_xlabel("node" if coords is None else "location")
    ax.set_title(title)


def plot_excursion(result, path, coords=None):
    """Excursion (or avoidance) function beside the marginal probabilities."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    label = "avoidance function" if result.direction in ("avoid", "contour") else "excursion function"
    _field(axes[0], result.F, coords, label)
    _field(axes[1], result.marginal_p, coords, "marginal probability")
    members = result.members()
    if coords is not None and coords.shape[1] == 2 and members.any():
        axes[0].scatter(coords[members, 0], coords[members, 1], s=2, c="white")
    fig.suptitle(f"u = {result.u:g}, alpha = {result.alpha:g}, set size {int(members.sum())}")
    fig.tight_layout()
    _save(fig, path)


def plot_contour(result, path, coords=None):
    """Sides of the avoiding pair and the contour region."""
    m = result.members()
    code = np.where(~m, 0.5, np.where(result.side > 0, 1.0, 0.0))
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    _field(ax, code, coords, "above (1) / contour region (0.5) / below (0)", cmap="coolwarm")
    fig.tight_layout()
    _save(fig, path)


def plot_coverage(reports, path):
    """``1 - alpha - p_hat`` against ``1 - alpha`` for each report."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for rep in reports:
        level = 1.0 - rep.alphas
        ax.plot(level, rep.diff, lw=1.2, label=f"{rep.method} ({rep.sampler})")
        ax.fill_between(level, rep.diff - 2 * rep.se, rep.diff + 2 * rep.se, alpha=0.15)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel("1 - alpha")
    ax.set_ylabel("1 - alpha - p_hat")
    if reports:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_sizes(rows, path, keys=("avoid1", "avoid2")):
    fig, ax = plt.subplots(figsize=(6, 4.2))
    idx = np.arange(len(rows))
    width = 0.8 / len(keys)
    for j, k in enumerate(keys):
        ax.bar(idx + j * width, [r[k] for r in rows], width, label=k)
    ax.set_xlabel("instance")
    ax.set_ylabel("contour region size")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
