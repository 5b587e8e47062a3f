"""Deterministic SVG bar chart of method scores."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .attribution import method_group, method_label

GROUP_COLORS = {
    "raw": "#ef8633",
    "absolute": "#3566b8",
    "cam": "#4fa34f",
    "perturbation": "#8c5bb5",
    "intrinsic": "#c23b3b",
}

BAR_HEIGHT = 18
BAR_GAP = 6
LABEL_WIDTH = 130
PLOT_WIDTH = 360
MARGIN = 20
AXIS_TICKS = 5


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def axis_span(scores: Sequence[float]) -> tuple[float, float]:
    """Score axis ``[min(0, min score), max(0, max score)]``; an all-zero chart spans [0, 1]."""
    lo = min(0.0, *scores) if scores else 0.0
    hi = max(0.0, *scores) if scores else 1.0
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


def plot_ranking(scores: Mapping[str, float] | Sequence[tuple[str, float]], title: str = "IDSDS") -> str:
    """One horizontal bar per method, in the given order, colored by method group."""
    items = list(scores.items()) if isinstance(scores, Mapping) else list(scores)
    values = [float(s) for _, s in items]
    lo, hi = axis_span(values)
    scale = PLOT_WIDTH / (hi - lo)
    x0 = MARGIN + LABEL_WIDTH
    zero_x = x0 + (0.0 - lo) * scale
    top = MARGIN + 20
    height = top + len(items) * (BAR_HEIGHT + BAR_GAP) + 40
    width = x0 + PLOT_WIDTH + MARGIN + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{x0 + PLOT_WIDTH / 2:.2f}" y="{MARGIN}" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for i, (method, score) in enumerate(items):
        y = top + i * (BAR_HEIGHT + BAR_GAP)
        left = min(zero_x, zero_x + score * scale)
        bar_w = abs(score) * scale
        color = GROUP_COLORS.get(method_group(method), "#777777")
        out.append(
            f'<text x="{x0 - 6}" y="{y + BAR_HEIGHT * 0.72:.2f}" text-anchor="end">{escape(method_label(method))}</text>'
        )
        out.append(
            f'<rect x="{left:.2f}" y="{y}" width="{bar_w:.2f}" height="{BAR_HEIGHT}" fill="{color}" '
            f'data-method="{escape(method)}" data-score="{score:.6f}"/>'
        )
        out.append(
            f'<text x="{max(left + bar_w, zero_x) + 4:.2f}" y="{y + BAR_HEIGHT * 0.72:.2f}">{score:.3f}</text>'
        )
    axis_y = top + len(items) * (BAR_HEIGHT + BAR_GAP) + 4
    out.append(f'<line x1="{x0}" y1="{axis_y}" x2="{x0 + PLOT_WIDTH}" y2="{axis_y}" stroke="black"/>')
    out.append(f'<line x1="{zero_x:.2f}" y1="{top - 4}" x2="{zero_x:.2f}" y2="{axis_y}" stroke="#999999"/>')
    for k in range(AXIS_TICKS + 1):
        v = lo + (hi - lo) * k / AXIS_TICKS
        tx = x0 + PLOT_WIDTH * k / AXIS_TICKS
        out.append(f'<line x1="{tx:.2f}" y1="{axis_y}" x2="{tx:.2f}" y2="{axis_y + 4}" stroke="black"/>')
        out.append(f'<text x="{tx:.2f}" y="{axis_y + 16}" text-anchor="middle">{_fmt(round(v, 6))}</text>')
    out.append(f'<text x="{x0 + PLOT_WIDTH / 2:.2f}" y="{axis_y + 32}" text-anchor="middle">{escape(title)} score</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
