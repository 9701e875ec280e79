"""Figures written next to the CSV artifacts of train/eval runs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def size(scale=1.0):
    width = 5.5 * scale
    return width, width * 0.618


def learning_curve(rows, path, title=None):
    """Train/validation MAE per epoch from metric-log rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        for split, style in (("train", "-"), ("val", "o-")):
            pts = [(r["epoch"], r["mae"]) for r in rows if r["split"] == split]
            if pts:
                ep, mae = zip(*pts)
                ax.plot(ep, mae, style, ms=3, lw=1, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def horizon_errors(report, path, minutes_per_step=5, title=None):
    """MAE and RMSE against forecast lead time."""
    steps = range(1, len(report.per_step) + 1)
    lead = [k * minutes_per_step for k in steps]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        ax.plot(lead, [s[0] for s in report.per_step], "o-", ms=3, lw=1, label="MAE")
        ax.plot(lead, [s[1] for s in report.per_step], "s-", ms=3, lw=1, label="RMSE")
        ax.set_xlabel("lead time (min)")
        ax.set_ylabel("error")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
