"""Line charts written directly as SVG text.

The drawing area is a fixed viewBox and every coordinate is printed with two decimals, so the same data always gives
the same bytes.
"""

from collections.abc import Mapping, Sequence
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

WIDTH = 640
PANEL_HEIGHT = 240
MARGIN_LEFT = 60
MARGIN_RIGHT = 150
MARGIN_TOP = 30
MARGIN_BOTTOM = 40
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
SMOOTHING_WINDOW = 50


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _bounds(series: Mapping[str, Sequence[float]]) -> tuple[float, float]:
    values = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return 0.0, 1.0
    low, high = float(values.min()), float(values.max())
    if low == high:
        return low - 0.5, high + 0.5
    return low, high


def panel(
    x: Sequence[float],
    series: Mapping[str, Sequence[float]],
    title: str,
    top: float = 0.0,
) -> list[str]:
    """SVG elements of one chart panel placed `top` units below the origin.

    Args:
        x: Shared x values
        series: Label -> y values, drawn in insertion order
        title: Panel title
        top: Vertical offset of the panel
    """
    x_arr = np.asarray(x, dtype=float)
    x_low, x_high = (float(x_arr.min()), float(x_arr.max())) if x_arr.size else (0.0, 1.0)
    if x_low == x_high:
        x_high = x_low + 1.0
    y_low, y_high = _bounds(series)
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    left = MARGIN_LEFT
    bottom = top + PANEL_HEIGHT - MARGIN_BOTTOM

    def px(value: float) -> float:
        return left + (value - x_low) / (x_high - x_low) * plot_w

    def py(value: float) -> float:
        return bottom - (value - y_low) / (y_high - y_low) * plot_h

    elements = [
        f'<text x="{_fmt(left)}" y="{_fmt(top + 18)}" font-size="14">{escape(title)}</text>',
        f'<rect x="{_fmt(left)}" y="{_fmt(top + MARGIN_TOP)}" width="{_fmt(plot_w)}" height="{_fmt(plot_h)}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{_fmt(left - 6)}" y="{_fmt(bottom)}" font-size="10" text-anchor="end">{y_low:.3g}</text>',
        f'<text x="{_fmt(left - 6)}" y="{_fmt(top + MARGIN_TOP + 10)}" font-size="10" '
        f'text-anchor="end">{y_high:.3g}</text>',
        f'<text x="{_fmt(left)}" y="{_fmt(bottom + 16)}" font-size="10">{x_low:g}</text>',
        f'<text x="{_fmt(left + plot_w)}" y="{_fmt(bottom + 16)}" font-size="10" text-anchor="end">{x_high:g}</text>',
    ]
    for i, (label, values) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        y_arr = np.asarray(values, dtype=float)
        points = " ".join(f"{_fmt(px(xv))},{_fmt(py(yv))}" for xv, yv in zip(x_arr, y_arr) if np.isfinite(yv))
        elements.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        legend_y = top + MARGIN_TOP + 12 + 16 * i
        elements.append(
            f'<line x1="{_fmt(left + plot_w + 10)}" y1="{_fmt(legend_y - 4)}" x2="{_fmt(left + plot_w + 30)}" '
            f'y2="{_fmt(legend_y - 4)}" stroke="{color}" stroke-width="2"/>'
        )
        elements.append(
            f'<text x="{_fmt(left + plot_w + 34)}" y="{_fmt(legend_y)}" font-size="11">{escape(label)}</text>'
        )
    return elements


def render(panels: Sequence[list[str]]) -> str:
    """Stack panels vertically into one SVG document."""
    height = PANEL_HEIGHT * len(panels)
    body = "\n".join(element for elements in panels for element in elements)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {height}" width="{WIDTH}" height="{height}">\n'
        f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>\n'
        f"{body}\n</svg>\n"
    )


def training_curves(metrics: pd.DataFrame, path: Path, window: int = SMOOTHING_WINDOW) -> Path:
    """Team return and option selection frequencies against the episode, as a trailing moving average."""
    frame = metrics.reset_index() if "episode" not in metrics.columns else metrics
    smoothed = frame.astype(float).rolling(window, min_periods=1).mean()
    episodes = frame["episode"].to_numpy(dtype=float)
    freq_columns = [c for c in frame.columns if c.startswith("freq_")]
    panels = [
        panel(episodes, {"team return": smoothed["mean_team_return"].to_numpy()}, "Mean per-step team return"),
        panel(
            episodes,
            {column.removeprefix("freq_"): smoothed[column].to_numpy() for column in freq_columns},
            "Option selection frequency",
            top=PANEL_HEIGHT,
        ),
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(panels))
    return path
