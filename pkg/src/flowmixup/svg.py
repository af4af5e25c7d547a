"""Minimal static SVG line charts (no timestamps, so output is reproducible)."""
from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def line_chart(series, x_labels, title="", width=640, height=360):
    """Render ``{name: [y...]}`` over categorical ``x_labels``; NaNs break the line."""
    left, right, top, bottom = 60, 20, 40, 60
    ys = np.array([v for vals in series.values() for v in vals], dtype=float)
    ys = ys[np.isfinite(ys)]
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(len(x_labels), 2)
    plot_w, plot_h = width - left - right, height - top - bottom

    def px(i):
        return left + plot_w * i / (n - 1)

    def py(v):
        return top + plot_h * (1 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        parts.append(f'<text x="{left - 5}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>')
    for i, label in enumerate(x_labels):
        parts.append(
            f'<text x="{px(i):.1f}" y="{top + plot_h + 15}" text-anchor="middle" font-family="sans-serif" font-size="10">{escape(str(label))}</text>'
        )
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        segment = []
        for i, v in enumerate(vals):
            if v is None or not np.isfinite(v):
                if len(segment) > 1:
                    parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(segment)}"/>')
                segment = []
                continue
            segment.append(f"{px(i):.1f},{py(v):.1f}")
            parts.append(f'<circle cx="{px(i):.1f}" cy="{py(v):.1f}" r="3" fill="{color}"/>')
        if len(segment) > 1:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(segment)}"/>')
        parts.append(
            f'<text x="{left + 10 + 120 * k}" y="{height - 10}" font-family="sans-serif" font-size="11" fill="{color}">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
