"""Deterministic SVG line and scatter charts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractViolation  # noqa: E402

MARKERS = ("o", "s", "^", "D", "v", "P")


@dataclass
class Series:
    """One curve. Points flagged in ``censored`` (e.g. runs that hit the
    iteration cap) are drawn with a hollow cross marker instead of joining the line."""

    label: str
    x: Sequence[float]
    y: Sequence[float]
    censored: Sequence[bool] | None = None
    line: bool = True


def emit_plot(
    series: Sequence[Series],
    path,
    *,
    logx: bool = False,
    logy: bool = False,
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
) -> None:
    if not series or all(len(s.x) == 0 for s in series):
        raise ContractViolation("nothing to plot")
    with plt.rc_context({"svg.hashsalt": "deeplinear", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for k, s in enumerate(series):
            x = np.asarray(s.x, dtype=np.float64)
            y = np.asarray(s.y, dtype=np.float64)
            cens = np.zeros(x.size, bool) if s.censored is None else np.asarray(s.censored, bool)
            marker = MARKERS[k % len(MARKERS)]
            style = "-" if s.line and (~cens).sum() > 1 else "none"
            (handle,) = ax.plot(x[~cens], y[~cens], linestyle=style, marker=marker, label=s.label)
            if cens.any():
                ax.plot(
                    x[cens],
                    y[cens],
                    linestyle="none",
                    marker="x",
                    markersize=9,
                    color=handle.get_color(),
                    label=f"{s.label} (cap)",
                )
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if any(s.label for s in series):
            ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
