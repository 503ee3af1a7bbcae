"""Minimal self-contained SVG line charts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 36, 52


@dataclass
class Series:
    label: str
    xs: list[float]
    ys: list[float]
    dotted: bool = False
    color: str | None = None


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    logx: bool = False
    logy: bool = False
    series: list[Series] = field(default_factory=list)

    def add(self, label, xs, ys, *, dotted=False, color=None) -> "Chart":
        self.series.append(Series(label, [float(x) for x in xs], [float(y) for y in ys], dotted, color))
        return self


def _usable(chart: Chart, x: float, y: float) -> bool:
    if not (math.isfinite(x) and math.isfinite(y)):
        return False
    return (x > 0 or not chart.logx) and (y > 0 or not chart.logy)


def _axis(lo: float, hi: float, log: bool):
    """Map data values into [0, 1]; returns (transform, tick values)."""
    if log:
        lo, hi = math.log10(lo), math.log10(hi)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo

    def f(v):
        return ((math.log10(v) if log else v) - lo) / span

    if log:
        ticks = [10.0 ** e for e in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= e <= hi + 1e-9]
        if len(ticks) < 2:
            ticks = [10.0 ** lo, 10.0 ** hi]
    else:
        step = 10 ** math.floor(math.log10(span / 5))
        for mult in (1, 2, 5, 10):
            if span / (step * mult) <= 6:
                step *= mult
                break
        start = math.ceil(lo / step) * step
        ticks = [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]
    return f, ticks


def _fmt_tick(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-3):
        return f"{v:.0e}"
    return f"{v:g}"


def render(chart: Chart) -> str:
    pts = [(x, y) for s in chart.series for x, y in zip(s.xs, s.ys) if _usable(chart, x, y)]
    if not pts:
        pts = [(1.0, 1.0)]
    fx, xticks = _axis(min(p[0] for p in pts), max(p[0] for p in pts), chart.logx)
    fy, yticks = _axis(min(p[1] for p in pts), max(p[1] for p in pts), chart.logy)
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def sx(v):
        return MARGIN_L + fx(v) * pw

    def sy(v):
        return MARGIN_T + (1 - fy(v)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(chart.title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in xticks:
        if 0 <= fx(t) <= 1:
            x = sx(t)
            out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T + ph}" x2="{x:.2f}" y2="{MARGIN_T + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{x:.2f}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{_fmt_tick(t)}</text>')
    for t in yticks:
        if 0 <= fy(t) <= 1:
            y = sy(t)
            out.append(f'<line x1="{MARGIN_L - 5}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="black"/>')
            out.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt_tick(t)}</text>')
    xl = chart.xlabel + (" (log)" if chart.logx else "")
    yl = chart.ylabel + (" (log)" if chart.logy else "")
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xl)}</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{escape(yl)}</text>')
    for i, s in enumerate(chart.series):
        color = s.color or PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s.xs, s.ys) if _usable(chart, x, y))
        dash = ' stroke-dasharray="3,4"' if s.dotted else ""
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} points="{coords}"/>')
        ly = MARGIN_T + 12 + 16 * i
        lx = MARGIN_L + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="1.6"{dash}/>')
        out.append(f'<text x="{lx + 28}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
