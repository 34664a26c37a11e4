"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .augmentation import Scheme  # noqa: E402

# Fixed metadata keeps PNG bytes identical across reruns.
_PNG_META = {"Software": None}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def reliability_diagram(report, path, title: str | None = None):
    """Bin accuracy against bin confidence, with the sample histogram below."""
    fig, (ax, axh) = plt.subplots(2, 1, figsize=(4.2, 5.2), sharex=True,
                                  gridspec_kw={"height_ratios": [3, 1]})
    width = 1.0 / report.n_bins
    lo = report.bin_edges[:-1]
    nz = report.counts > 0
    ax.bar(lo[nz], report.mean_accuracy[nz], width=width, align="edge", color="#4c72b0",
           edgecolor="white", linewidth=0.3, label="accuracy")
    ax.bar(lo[nz], report.mean_confidence[nz] - report.mean_accuracy[nz], bottom=report.mean_accuracy[nz],
           width=width, align="edge", color="#dd8452", alpha=0.45, label="gap")
    ax.plot([0, 1], [0, 1], ls="--", color="0.3", lw=0.8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.text(0.04, 0.92, f"ECE = {report.ece:.3f}", transform=ax.transAxes)
    ax.legend(loc="lower right", frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    axh.bar(lo, report.counts, width=width, align="edge", color="0.5")
    axh.set_yscale("symlog")
    axh.set_xlabel("confidence")
    axh.set_ylabel("count")
    axh.set_xlim(0, 1)
    for a in (ax, axh):
        _style(a)
    _save(fig, path)


def attribution_figure(image: np.ndarray | None, values: np.ndarray, path, title: str | None = None):
    """Heat map of an attribution map, overlaid on the image when one is given."""
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    if image is not None:
        base = image[0] if image.shape[0] == 1 else image.transpose(1, 2, 0)
        ax.imshow(base, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        h, w = image.shape[1:]
        im = ax.imshow(values, cmap="inferno", alpha=0.55, extent=(-0.5, w - 0.5, h - 0.5, -0.5),
                       interpolation="nearest")
    else:
        im = ax.imshow(values, cmap="inferno", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    _save(fig, path)


def sweep_figure(rows: list[dict], path, baseline: dict | None = None):
    """Subgroup accuracy and gap against quantile, one panel per scheme."""
    schemes = [s.value for s in Scheme if any(r["scheme"] == s.value for r in rows)]
    if not schemes:
        return
    fig, axes = plt.subplots(1, len(schemes), figsize=(3.0 * len(schemes), 3.0), sharey=True, squeeze=False)
    for ax, scheme in zip(axes[0], schemes):
        sub = sorted((r for r in rows if r["scheme"] == scheme), key=lambda r: r["quantile"])
        q = [r["quantile"] for r in sub]
        ax.plot(q, [r["acc_g0"] for r in sub], "o-", label="group 0", color="#4c72b0")
        ax.plot(q, [r["acc_g1"] for r in sub], "s-", label="group 1", color="#dd8452")
        ax.plot(q, [r["gap"] for r in sub], "^--", label="gap", color="0.3")
        if baseline is not None:
            ax.axhline(baseline["gap"], color="0.3", lw=0.7, ls=":")
        ax.set_title(Scheme(scheme).label, fontsize=9)
        ax.set_xlabel("quantile")
        ax.set_ylim(0, 1)
        _style(ax)
    axes[0][0].set_ylabel("accuracy / gap")
    axes[0][-1].legend(frameon=False, fontsize=7)
    _save(fig, path)


def loss_curve(history, path):
    fig, ax = plt.subplots(figsize=(4, 2.8))
    epochs = [e["epoch"] for e in history.epochs]
    ax.plot(epochs, [e["loss"] for e in history.epochs], color="#4c72b0", label="loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [e["accuracy"] for e in history.epochs], color="#dd8452", label="accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("patch accuracy")
    _style(ax)
    _save(fig, path)
