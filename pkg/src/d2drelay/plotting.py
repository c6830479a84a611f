"""Optional figures for experiment results (PNG files next to the data)."""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}

LABELS = {
    "d2d_pair_distance": "D2D pair distance (m)",
    "d2d_ring_radius": "relay to D2D distance (m)",
    "num_d2d_pairs": "number of D2D pairs",
    "theta": "violation probability",
    "psi": "uncertainty bound",
    "": "run",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_figures(metrics: Sequence, stem: str) -> list:
    """Plot sum-rate, mean D2D rate and rate gain against the sweep variable.

    Files are written as ``<stem>_<quantity>.png``; the list of paths is
    returned. Nothing is written for an empty result list.
    """
    if not metrics:
        return []
    plt = _pyplot()
    var = metrics[0].sweep_variable
    x = np.array([m.sweep_value for m in metrics], dtype=float)
    if np.all(np.isnan(x)):
        x = np.arange(len(metrics), dtype=float)
    series = {
        "sum_rate": ("network sum-rate (Mb/s)", [m.sum_rate / 1e6 for m in metrics]),
        "d2d_rate": ("mean D2D rate (Mb/s)", [m.mean_d2d_rate / 1e6 for m in metrics]),
        "rate_gain": ("rate gain over direct D2D (%)", [m.rate_gain_pct for m in metrics]),
    }
    paths = []
    with plt.rc_context(STYLE):
        for key, (ylabel, y) in series.items():
            fig, ax = plt.subplots()
            ax.plot(x, y, marker="o", lw=1.2)
            if key == "rate_gain":
                ax.axhline(0.0, color="0.4", lw=0.8)
            ax.set_xlabel(LABELS.get(var, var))
            ax.set_ylabel(ylabel)
            ax.set_title(f"{metrics[0].mode}, {metrics[0].num_drops} drops")
            fig.tight_layout()
            path = f"{stem}_{key}.png"
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
    return paths


def render_comparison(results: dict, stem: str) -> list:
    """One sum-rate figure with a line per mode (``{mode: metrics}``)."""
    if not results:
        return []
    plt = _pyplot()
    path = f"{stem}_compare.png"
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        var = ""
        for mode, metrics in results.items():
            if not metrics:
                continue
            var = metrics[0].sweep_variable
            x = np.array([m.sweep_value for m in metrics], dtype=float)
            if np.all(np.isnan(x)):
                x = np.arange(len(metrics), dtype=float)
            ax.plot(x, [m.sum_rate / 1e6 for m in metrics], marker="o", lw=1.2, label=mode)
        ax.set_xlabel(LABELS.get(var, var))
        ax.set_ylabel("network sum-rate (Mb/s)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return [path]
