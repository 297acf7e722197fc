"""Minimal SVG line charts with confidence ribbons."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


@dataclass
class Series:
    x: list
    y: list
    lo: list | None = None
    hi: list | None = None
    label: str = ""
    color: str | None = None
    dashed: bool = False


@dataclass
class Panel:
    series: list[Series]
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    vlines: list[tuple[float, str]] = field(default_factory=list)  # (x, color)
    logx: bool = False


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def _finite(values) -> list[float]:
    return [float(v) for v in values if v is not None and math.isfinite(float(v))]


def _panel_svg(p: Panel, ox: float, oy: float, w: float, h: float) -> list[str]:
    left, right, top, bottom = 55, 15, 28, 40
    pw, ph = w - left - right, h - top - bottom
    tx = (lambda v: math.log10(v)) if p.logx else (lambda v: v)
    xs = [tx(v) for s in p.series for v in _finite(s.x)] + [tx(v) for v, _ in p.vlines]
    ys = [v for s in p.series for arr in (s.y, s.lo or [], s.hi or []) for v in _finite(arr)]
    if not xs or not ys:
        return []
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ox + left + (tx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return oy + top + (y1 - v) / (y1 - y0) * ph

    out = [f'<rect x="{ox + left}" y="{oy + top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    if p.title:
        out.append(f'<text x="{ox + left + pw / 2}" y="{oy + 18}" text-anchor="middle" '
                   f'font-size="13">{escape(p.title)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ox + left - 4}" x2="{ox + left}" y1="{py(t):.2f}" y2="{py(t):.2f}" stroke="#444"/>')
        out.append(f'<text x="{ox + left - 6}" y="{py(t) + 4:.2f}" text-anchor="end" font-size="10">{t:g}</text>')
    xt = _ticks(x0, x1)
    for t in xt:
        label = f"{10 ** t:.2g}" if p.logx else f"{t:g}"
        xv = ox + left + (t - x0) / (x1 - x0) * pw
        out.append(f'<line x1="{xv:.2f}" x2="{xv:.2f}" y1="{oy + top + ph}" y2="{oy + top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{xv:.2f}" y="{oy + top + ph + 16}" text-anchor="middle" font-size="10">{label}</text>')
    if p.xlabel:
        out.append(f'<text x="{ox + left + pw / 2}" y="{oy + h - 6}" text-anchor="middle" '
                   f'font-size="11">{escape(p.xlabel)}</text>')
    if p.ylabel:
        cx, cy = ox + 14, oy + top + ph / 2
        out.append(f'<text x="{cx}" y="{cy}" text-anchor="middle" font-size="11" '
                   f'transform="rotate(-90 {cx} {cy})">{escape(p.ylabel)}</text>')
    for k, s in enumerate(p.series):
        color = s.color or PALETTE[k % len(PALETTE)]
        if s.lo is not None and s.hi is not None:
            upper = [(px(x), py(v)) for x, v in zip(s.x, s.hi) if math.isfinite(v)]
            lower = [(px(x), py(v)) for x, v in zip(s.x, s.lo) if math.isfinite(v)]
            pts = upper + lower[::-1]
            if pts:
                path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
                out.append(f'<polygon points="{path}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = [(px(x), py(v)) for x, v in zip(s.x, s.y) if math.isfinite(v)]
        if len(pts) == 1:
            a, b = pts[0]
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>')
        elif pts:
            dash = ' stroke-dasharray="5,3"' if s.dashed else ""
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
    for xv, color in p.vlines:
        out.append(f'<line x1="{px(xv):.2f}" x2="{px(xv):.2f}" y1="{oy + top}" y2="{oy + top + ph}" '
                   f'stroke="{color}" stroke-dasharray="4,3"/>')
    labelled = [(k, s) for k, s in enumerate(p.series) if s.label]
    for row, (k, s) in enumerate(labelled):
        color = s.color or PALETTE[k % len(PALETTE)]
        yv = oy + top + 12 + 14 * row
        out.append(f'<line x1="{ox + left + 8}" x2="{ox + left + 24}" y1="{yv - 4}" y2="{yv - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ox + left + 28}" y="{yv}" font-size="10">{escape(s.label)}</text>')
    return out


def render(panels: list[Panel], columns: int = 1, width: float = 420, height: float = 300) -> str:
    """Lay panels out on a grid and return the SVG document."""
    if not panels:
        raise ValueError("nothing to plot")
    columns = max(1, min(columns, len(panels)))
    rows = math.ceil(len(panels) / columns)
    body = []
    for k, p in enumerate(panels):
        body += _panel_svg(p, (k % columns) * width, (k // columns) * height, width, height)
    W, H = columns * width, rows * height
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")
