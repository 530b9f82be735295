"""Minimal deterministic SVG line charts (no timestamps, fixed number formatting)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0]
    if hi <= lo:
        hi = lo + (abs(lo) if lo else 1.0)
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks, t = [], start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 12))
        t += step
    if ticks[-1] < hi:
        ticks.append(round(t, 12))
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def line_chart(series, title="", xlabel="", ylabel="", width=640, height=400, logy=False) -> str:
    """Render ``series`` -- a list of ``(label, xs, ys)`` -- as an SVG document string."""
    ml, mr, mt, mb = 70, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def ty(v):
        return math.log10(v) if logy else v

    pts = [(x, ty(y)) for _, xs, ys in series for x, y in zip(xs, ys) if not logy or y > 0]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    xt, yt = nice_ticks(x0, x1), nice_ticks(y0, y1)
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]

    def sx(x):
        return ml + (x - x0) / ((x1 - x0) or 1) * pw

    def sy(y):
        return mt + ph - (y - y0) / ((y1 - y0) or 1) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for t in xt:
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{mt}" x2="{_fmt(x)}" y2="{mt + ph}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{_fmt(x)}" y="{mt + ph + 15}" text-anchor="middle">{_label(t)}</text>')
    for t in yt:
        y = sy(t)
        lab = _label(10**t) if logy else _label(t)
        out.append(f'<line x1="{ml}" y1="{_fmt(y)}" x2="{ml + pw}" y2="{_fmt(y)}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{ml - 5}" y="{_fmt(y + 4)}" text-anchor="end">{lab}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="15" y="{mt + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {mt + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = [f"{_fmt(sx(x))},{_fmt(sy(ty(y)))}" for x, y in zip(xs, ys) if not logy or y > 0]
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(coords)}"/>')
        ly = mt + 10 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
