"""Report figures written next to the CSV/JSON outputs (Agg backend, no display)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def report_style(width: float = 5.0, font_size: int = 9) -> dict:
    """rc settings shared by every report figure."""
    return {
        "figure.figsize": (width, width * GOLDEN),
        "figure.dpi": 100,
        "savefig.dpi": 150,
        "font.size": font_size,
        "axes.labelsize": font_size,
        "axes.titlesize": font_size + 1,
        "legend.fontsize": font_size - 1,
        "xtick.labelsize": font_size - 1,
        "ytick.labelsize": font_size - 1,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "lines.linewidth": 1.2,
        "svg.hashsalt": "cdrscope",
        "pdf.fonttype": 42,
    }


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return path


def plot_roc(curves: dict, path):
    """``curves`` maps model name -> RocCurve."""
    with plt.rc_context(report_style()):
        fig, ax = plt.subplots()
        for name, c in curves.items():
            ax.plot(c.fpr, c.tpr, label=f"{name} (AUC {c.auc:.3f})", drawstyle="default")
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_fit(samples, fits: dict, path, xlabel="w"):
    """Log-binned density with fitted curves overlaid."""
    with plt.rc_context(report_style()):
        fig, ax = plt.subplots()
        first = next(iter(fits.values()))
        ax.loglog(first.bin_centers, 10 ** first.log_density, "o", ms=3, color="k", label="empirical")
        x = np.logspace(np.log10(first.bin_centers.min()), np.log10(first.bin_centers.max()), 200)
        for name, f in fits.items():
            ax.loglog(x, 10 ** f.predict_log_density(x), label=f"{name} ($R^2$={f.r2:.3f})")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_cutoff_sweep(sweep, path):
    with plt.rc_context(report_style(width=7)):
        fig, (a1, a2) = plt.subplots(1, 2)
        a1.semilogy(sweep.cutoffs, sweep.gc_fraction, "o-", ms=3)
        a1.set_xlabel("cutoff c")
        a1.set_ylabel("giant component fraction")
        a2.loglog(sweep.cutoffs, np.maximum(sweep.edge_count, 1), "o-", ms=3)
        a2.set_xlabel("cutoff c")
        a2.set_ylabel("edges")
        return _save(fig, path)


def plot_degree_distribution(dists: dict, path):
    """``dists`` maps a label -> DegreeDistribution."""
    with plt.rc_context(report_style()):
        fig, ax = plt.subplots()
        for label, d in dists.items():
            k = np.flatnonzero(d.histogram)
            k = k[k > 0]
            if len(k) == 0:
                continue
            p = d.histogram[k] / d.histogram.sum()
            tail = "" if d.exponent is None else f", $\\alpha$={d.exponent:.2f}"
            ax.loglog(k, p, ".", ms=3, label=f"{label}{tail}")
        ax.set_xlabel("degree k")
        ax.set_ylabel("P(k)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_reciprocity(values: dict, path, bins: int = 41):
    """Histograms of per-node reciprocity for each variant."""
    with plt.rc_context(report_style()):
        fig, ax = plt.subplots()
        edges = np.linspace(-1, 1, bins + 1)
        for name, v in values.items():
            ax.hist(np.asarray(v), bins=edges, histtype="step", density=True, label=name)
        ax.set_xlabel("R")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_community_sizes(sizes, path):
    with plt.rc_context(report_style()):
        fig, ax = plt.subplots()
        sizes = np.asarray(sizes)
        if len(sizes):
            counts = np.bincount(sizes)
            k = np.flatnonzero(counts)
            ax.loglog(k, counts[k], "o", ms=3)
        ax.set_xlabel("community size")
        ax.set_ylabel("communities")
        return _save(fig, path)


def plot_bars(labels, values, path, xlabel="", top: int = 20):
    """Horizontal bar chart of the first ``top`` entries (largest at the top)."""
    labels = list(labels)[:top][::-1]
    values = np.asarray(values, dtype=float)[:top][::-1]
    with plt.rc_context(report_style(width=6)):
        fig, ax = plt.subplots(figsize=(6, 0.25 * len(labels) + 1))
        ax.barh(range(len(labels)), values, color="0.35")
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=7)
        ax.set_xlabel(xlabel)
        return _save(fig, path)
