"""Static SVG drawing of one segmented frame: marker by class, colour by instance."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from matplotlib.lines import Line2D

from .clustering import NOISE, InstancePrediction
from .synthdata import CLASS_NAMES

MARKERS = ("o", "^", "s", "D", "v", "P", "X", "*")
NOISE_COLOR = "#b0b0b0"


def point_styles(prediction: InstancePrediction) -> list[tuple[str, str]]:
    """``(marker, colour)`` per point.

    Instances get palette colours in order of first appearance, so colours
    are distinct across instances of the same class.  Unclustered points are
    grey.
    """
    palette = matplotlib.colormaps["tab20"].colors
    colors: dict[int, str] = {}
    out = []
    for cls, inst in zip(prediction.classes.tolist(), prediction.instances.tolist()):
        marker = MARKERS[cls % len(MARKERS)] if cls >= 0 else "."
        if inst == NOISE:
            color = NOISE_COLOR
        else:
            if inst not in colors:
                colors[inst] = matplotlib.colors.to_hex(palette[len(colors) % len(palette)])
            color = colors[inst]
        out.append((marker, color))
    return out


def render_svg(points: np.ndarray, prediction: InstancePrediction, title: str = "",
               class_names=CLASS_NAMES) -> bytes:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    fig = Figure(figsize=(6, 6))
    FigureCanvasSVG(fig)
    ax = fig.add_subplot()
    styles = point_styles(prediction)
    groups: dict[tuple[str, str], list[int]] = {}
    for i, style in enumerate(styles):
        groups.setdefault(style, []).append(i)
    for (marker, color), idx in sorted(groups.items()):
        ax.scatter(points[idx, 1], points[idx, 0], marker=marker, c=color, s=30, edgecolors="k", linewidths=0.3)
    handles = [Line2D([], [], linestyle="", marker=MARKERS[c % len(MARKERS)], color="#555555", label=name)
               for c, name in enumerate(class_names)]
    ax.legend(handles=handles, loc="upper right", fontsize=8)
    ax.set_xlabel("y [m]")
    ax.set_ylabel("x [m]")
    if title:
        ax.set_title(title)
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": "radcon", "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def export_plot(points: np.ndarray, prediction: InstancePrediction, out_path, title: str = "") -> Path:
    out_path = Path(out_path)
    out_path.write_bytes(render_svg(points, prediction, title))
    return out_path
