"""Stacked-panel SVG of a decomposition."""

from __future__ import annotations

import numpy as np


def decomposition_svg(path, times, observed, fit, intervals=None, *, n_marks: int = 5, forecast=None) -> None:
    """One panel per series: data, trend, seasonal and covariate parts, remainder.

    Each panel is an SVG group with id ``panel-<name>``.  Interval bands are
    shaded; the ``n_marks`` largest absolute remainders get vertical rules.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "strdecomp"
    table = fit.components.table()
    parts = [k for k in table if k != "remainder"]
    names = ["data"] + parts + ["remainder"]
    x = np.arange(len(observed)) if times is None else np.asarray(times)
    try:
        x = x.astype(float)
    except (TypeError, ValueError):
        x = np.arange(len(observed), dtype=float)
    fig, axes = plt.subplots(len(names), 1, sharex=True, figsize=(9, 1.6 * len(names) + 0.6), squeeze=False)
    axes = axes[:, 0]
    rem = table["remainder"]
    finite = np.flatnonzero(np.isfinite(rem))
    marks = finite[np.argsort(-np.abs(rem[finite]), kind="stable")[:n_marks]] if len(finite) else []
    for ax, name in zip(axes, names):
        ax.set_gid(f"panel-{name}")
        if name == "data":
            ax.plot(x, observed, color="black", lw=0.8, label="observed")
            ax.plot(x, fit.fitted, color="tab:blue", lw=0.8, label="fitted")
            if forecast is not None:
                ax.fill_between(forecast[0], forecast[1], forecast[2], color="tab:orange", alpha=0.3, lw=0)
        elif name == "remainder":
            ax.plot(x, rem, color="black", lw=0.6)
            ax.axhline(0.0, color="grey", lw=0.5)
        else:
            ax.plot(x, table[name], color="tab:red", lw=0.8)
            if intervals and name in intervals:
                lo, hi = intervals[name]
                ax.fill_between(x, lo, hi, color="tab:blue", alpha=0.3, lw=0)
        for t in marks:
            ax.axvline(x[t], color="grey", lw=0.5, alpha=0.7)
        ax.set_ylabel(name, fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
