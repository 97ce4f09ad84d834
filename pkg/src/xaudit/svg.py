"""Bar charts of attributions as plain SVG."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .attribution import Attribution

WIDTH = 480
HEIGHT = 260
MARGIN_X = 40
TOP = 40
HALF = 90  # pixels for |value| = 1 on either side of the axis


def _num(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def render_attribution_svg(a: Attribution, title: str = "") -> str:
    """One bar per feature in index order, L1-normalized, positive values above
    the zero axis and negative below. A zero attribution draws the axis only
    (every bar has height 0)."""
    v = np.asarray(a.values, dtype=float)
    total = np.abs(v).sum()
    v = v / total if total > 0 else np.zeros_like(v)
    d = v.size
    axis_y = TOP + HALF
    slot = (WIDTH - 2 * MARGIN_X) / d
    bar_w = slot * 0.7
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:g}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>',
    ]
    for j, val in enumerate(v):
        h = abs(val) * HALF
        x = MARGIN_X + j * slot + (slot - bar_w) / 2
        y = axis_y - h if val >= 0 else axis_y
        color = "#1f77b4" if val >= 0 else "#d62728"
        out.append(
            f'<rect class="bar" data-feature="{j + 1}" data-value="{val:.6f}" '
            f'x="{_num(x)}" y="{_num(y)}" width="{_num(bar_w)}" height="{_num(h)}" fill="{color}"/>'
        )
        out.append(
            f'<text x="{_num(x + bar_w / 2)}" y="{axis_y + HALF + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">F{j + 1}</text>'
        )
    out.append(
        f'<line class="axis" x1="{MARGIN_X}" y1="{axis_y}" x2="{WIDTH - MARGIN_X}" y2="{axis_y}" stroke="black" stroke-width="1"/>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"
