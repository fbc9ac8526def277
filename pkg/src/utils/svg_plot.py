"""
Latency/effectiveness chart rendered with matplotlib.

x is latency in ms on a log axis padded to whole decades, y is the metric in
[0, 1]. The band left of the low-latency cutoff is shaded and tagged with the
SVG id "low-latency-zone". A fixed hash salt and no date metadata keep the
SVG identical across runs.
"""

import io
import math
from typing import Dict, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

MIN_LATENCY_MS = 1e-3
ZONE_ID = "low-latency-zone"
SVG_HASH_SALT = "shallow-rerank"


def latency_limits(values: Sequence[float]) -> Tuple[float, float]:
    """Whole-decade x limits covering every value (at least one decade wide)"""
    logs = [math.log10(max(v, MIN_LATENCY_MS)) for v in values]
    lo = math.floor(min(logs))
    hi = max(math.ceil(max(logs)), lo + 1)
    return 10.0 ** lo, 10.0 ** hi


def tradeoff_figure(
    series: Dict[str, Sequence[Tuple[float, float]]],
    low_latency_cutoff_ms: float = 50.0,
    y_label: str = "metric",
) -> Figure:
    if not series:
        raise ValueError("plot needs at least one series")
    for name, points in series.items():
        if not points:
            raise ValueError(f"series {name!r} is empty")

    latencies = [x for points in series.values() for x, _ in points] + [low_latency_cutoff_ms]
    left, right = latency_limits(latencies)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.axvspan(left, low_latency_cutoff_ms, color="0.91", zorder=0, gid=ZONE_ID)
    ax.text(left * 1.1, 0.97, f"≤ {low_latency_cutoff_ms:g} ms", va="top", fontsize=8, color="0.35")
    for i, (name, points) in enumerate(series.items()):
        ordered = sorted(points)
        ax.plot(
            [max(x, MIN_LATENCY_MS) for x, _ in ordered],
            [y for _, y in ordered],
            marker="o",
            markersize=3,
            linewidth=2,
            label=name,
            gid=f"series-{i}",
        )
    ax.set_xscale("log")
    ax.set_xlim(left, right)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("latency (ms, log scale)")
    ax.set_ylabel(y_label)
    ax.grid(True, which="major", alpha=0.3)
    ax.legend(loc="center left", bbox_to_anchor=(1.02, 0.5), frameon=False)
    fig.tight_layout()
    return fig


def render_tradeoff_svg(
    series: Dict[str, Sequence[Tuple[float, float]]],
    low_latency_cutoff_ms: float = 50.0,
    y_label: str = "metric",
) -> str:
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig = tradeoff_figure(series, low_latency_cutoff_ms, y_label)
        try:
            buffer = io.StringIO()
            fig.savefig(buffer, format="svg", bbox_inches="tight", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buffer.getvalue()
