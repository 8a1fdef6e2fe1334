"""Minimal SVG line plots (ROC/PR curves, sweep results). No plotting dependency."""
from __future__ import annotations

import math
import os
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 400
MARGIN = dict(left=60, right=20, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / n for i in range(n + 1)]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "",
              xlim: tuple[float, float] | None = None, ylim: tuple[float, float] | None = None,
              diagonal: bool = False, markers: bool = False) -> str:
    """``series``: iterable of ``(label, xs, ys)``. Returns the SVG document as text."""
    series = [(str(lab), [float(x) for x in xs], [float(y) for y in ys]) for lab, xs, ys in series]
    finite = lambda vals: [v for v in vals if math.isfinite(v)]  # noqa: E731
    all_x = finite([x for _, xs, _ in series for x in xs]) or [0.0, 1.0]
    all_y = finite([y for _, _, ys in series for y in ys]) or [0.0, 1.0]
    x0, x1 = xlim or (min(all_x), max(all_x))
    y0, y1 = ylim or (min(all_y), max(all_y))
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x: float) -> float:
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{MARGIN["top"] + ph}" x2="{px(t):.2f}" '
                   f'y2="{MARGIN["top"] + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"] - 4}" y1="{py(t):.2f}" x2="{MARGIN["left"]}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    if diagonal:
        out.append(f'<line x1="{px(x0):.2f}" y1="{py(y0):.2f}" x2="{px(x1):.2f}" y2="{py(y1):.2f}" '
                   'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if markers:
            for x, y in zip(xs, ys):
                if math.isfinite(x) and math.isfinite(y):
                    out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = MARGIN["top"] + 14 + 14 * i
        out.append(f'<line x1="{MARGIN["left"] + pw - 110}" y1="{ly - 4}" x2="{MARGIN["left"] + pw - 92}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{MARGIN["left"] + pw - 88}" y="{ly}">{escape(label)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | os.PathLike, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)
