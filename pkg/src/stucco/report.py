"""Figures from a finished run directory."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .experiment import AMBIGUITY_CUTOFF, METHODS, method_stats, plot_table, read_summary

log = logging.getLogger(__name__)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_fmi_ce(rows, path) -> Path:
    """FMI against CE per method: medians with 20-80th percentile bars, all runs and ambiguous runs."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2), sharey=True)
    panels = (("all runs", plot_table(rows)),
              (f"ambiguity >= {AMBIGUITY_CUTOFF}", plot_table(rows, AMBIGUITY_CUTOFF)))
    for ax, (title, table) in zip(axes, panels):
        for d in table:
            if d["fmi_median"] is None or d["ce_cm_median"] is None:
                continue
            x, y = d["ce_cm_median"], d["fmi_median"]
            ax.errorbar(x, y, xerr=[[x - d["ce_cm_p20"]], [d["ce_cm_p80"] - x]],
                        yerr=[[y - d["fmi_p20"]], [d["fmi_p80"] - y]], fmt="o", capsize=3,
                        label=f"{d['method']} (n={d['runs']})")
        if not table:
            ax.text(0.5, 0.5, "no runs", ha="center", va="center", transform=ax.transAxes)
        else:
            ax.legend(fontsize=8)
        ax.set_title(title)
        ax.set_xlabel("contact error (cm)")
        ax.set_xlim(left=0)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("FMI")
    axes[0].set_ylim(0, 1.05)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_retrieval(rows, path) -> Path | None:
    """Median CE and grasp success per preset and method; None without retrieval runs."""
    stats = [d for d in method_stats(rows) if d["grasp_rate"] is not None]
    if not stats:
        return None
    plt = _pyplot()
    presets = sorted({d["preset"] for d in stats})
    methods = [m for m in METHODS if any(d["method"] == m for d in stats)]
    width = 0.8 / len(methods)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(presets))
    for k, m in enumerate(methods):
        by = {d["preset"]: d for d in stats if d["method"] == m}
        ce = [by[p]["ce_cm_median"] if p in by and by[p]["ce_cm_median"] is not None else np.nan
              for p in presets]
        gr = [100 * by[p]["grasp_rate"] if p in by else np.nan for p in presets]
        axes[0].bar(x + k * width, ce, width, label=m)
        axes[1].bar(x + k * width, gr, width, label=m)
    for ax, label in zip(axes, ("median contact error (cm)", "grasp success (%)")):
        ax.set_xticks(x + width * (len(methods) - 1) / 2, presets)
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    axes[1].set_ylim(0, 100)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(run_dir) -> list[Path]:
    """Write ``fmi_ce.png`` and, when a target was retrieved, ``retrieval.png`` into ``run_dir``."""
    run_dir = Path(run_dir)
    summary = run_dir / "summary.csv"
    if not summary.exists():
        raise FileNotFoundError(f"{summary} not found; run an experiment first")
    rows = read_summary(summary)
    out = [plot_fmi_ce(rows, run_dir / "fmi_ce.png")]
    r = plot_retrieval(rows, run_dir / "retrieval.png")
    if r is not None:
        out.append(r)
    for p in out:
        log.info("wrote %s", p)
    return out
