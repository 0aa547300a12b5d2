"""Minimal deterministic SVG line charts for loss curves and profile sweeps."""
from __future__ import annotations

import math
from html import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def line_chart(series: dict[str, tuple[list[float], list[float]]], title: str = "", xlabel: str = "",
               ylabel: str = "", width: int = 640, height: int = 400) -> str:
    """Render ``{name: (xs, ys)}`` as polylines with axis bounds and a legend."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        raise ValueError("nothing to plot")
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    ml, mr, mt, mb = 70, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{ml}" y="{mt + ph + 15}" text-anchor="middle">{x0:.4g}</text>',
        f'<text x="{ml + pw}" y="{mt + ph + 15}" text-anchor="middle">{x1:.4g}</text>',
        f'<text x="{ml - 5}" y="{mt + ph}" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{ml - 5}" y="{mt + 10}" text-anchor="end">{y1:.4g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 + 14 * i
        out.append(f'<line x1="{ml + pw - 120}" y1="{ly - 4}" x2="{ml + pw - 100}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 95}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
