"""Minimal deterministic SVG line charts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional
from xml.sax.saxutils import escape

PALETTE = {"steered": "#1f77b4", "random": "#ff7f0e", "orthogonal": "#2ca02c"}
FALLBACK_COLORS = ("#d62728", "#9467bd", "#8c564b", "#e377c2")


def nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    """Round tick values (1, 2, 5 x 10^k spacing) covering ``[lo, hi]``."""
    if hi < lo:
        lo, hi = hi, lo
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.floor(lo / step) * step
    ticks = []
    k = 0
    while True:
        t = first + k * step
        if t > hi + step * 1e-9:
            break
        ticks.append(round(t, 12) + 0.0)
        k += 1
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 12))
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    """Tick positions in log10 space: whole decades, or round values inside one decade."""
    if math.floor(hi) - math.ceil(lo) >= 1:
        return [float(k) for k in range(math.floor(lo), math.ceil(hi) + 1)]
    return [math.log10(v) for v in nice_ticks(10 ** lo, 10 ** hi) if v > 0]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if v == int(v) and abs(v) < 1e7:
        return str(int(v))
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:g}"


@dataclass
class Series:
    label: str
    x: list
    y: list
    color: Optional[str] = None
    dashed: bool = False


@dataclass
class LineChart:
    title: str
    x_label: str
    y_label: str
    series: list = field(default_factory=list)
    width: int = 640
    height: int = 400
    log_y: bool = False
    vlines: list = field(default_factory=list)  # (x, label)
    zero_line: bool = True

    margin_left = 72
    margin_right = 150
    margin_top = 40
    margin_bottom = 56

    def add(self, series: Series):
        self.series.append(series)

    def _ty(self, v):
        return math.log10(v) if self.log_y else v

    def render(self) -> str:
        xs = [x for s in self.series for x in s.x] + [x for x, _ in self.vlines]
        ys = [self._ty(y) for s in self.series for y in s.y if math.isfinite(y) and (y > 0 or not self.log_y)]
        if not xs:
            xs = [0.0, 1.0]
        if not ys:
            ys = [0.0, 1.0]
        xt = nice_ticks(min(xs), max(xs))
        if self.log_y:
            yt = _log_ticks(min(ys), max(ys))
        else:
            yt = nice_ticks(min(ys), max(ys))
        x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
        pw = self.width - self.margin_left - self.margin_right
        ph = self.height - self.margin_top - self.margin_bottom

        def px(x):
            return self.margin_left + (x - x0) / (x1 - x0) * pw

        def py(y):
            return self.margin_top + ph - (y - y0) / (y1 - y0) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{_fmt(self.margin_left + pw / 2)}" y="22" text-anchor="middle" font-size="14">{escape(self.title)}</text>',
        ]
        # grid and ticks
        for t in xt:
            X = _fmt(px(t))
            out.append(f'<line x1="{X}" y1="{_fmt(py(y0))}" x2="{X}" y2="{_fmt(py(y1))}" stroke="#eeeeee"/>')
            out.append(f'<text x="{X}" y="{_fmt(py(y0) + 16)}" text-anchor="middle">{_tick_label(t)}</text>')
        for t in yt:
            Y = _fmt(py(t))
            label = _tick_label(round(10 ** t, 6)) if self.log_y else _tick_label(t)
            out.append(f'<line x1="{_fmt(px(x0))}" y1="{Y}" x2="{_fmt(px(x1))}" y2="{Y}" stroke="#eeeeee"/>')
            out.append(f'<text x="{_fmt(px(x0) - 6)}" y="{Y}" text-anchor="end" dominant-baseline="middle">{label}</text>')
        out.append(
            f'<rect x="{_fmt(px(x0))}" y="{_fmt(py(y1))}" width="{_fmt(pw)}" height="{_fmt(ph)}" fill="none" stroke="#333333"/>'
        )
        if self.zero_line and not self.log_y and y0 < 0 < y1:
            out.append(
                f'<line class="zero" x1="{_fmt(px(x0))}" y1="{_fmt(py(0))}" x2="{_fmt(px(x1))}" y2="{_fmt(py(0))}" stroke="#999999"/>'
            )
        # axis labels
        out.append(
            f'<text x="{_fmt(self.margin_left + pw / 2)}" y="{self.height - 14}" text-anchor="middle">{escape(self.x_label)}</text>'
        )
        cy = _fmt(self.margin_top + ph / 2)
        out.append(
            f'<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">{escape(self.y_label)}</text>'
        )
        # series
        for i, s in enumerate(self.series):
            color = s.color or PALETTE.get(s.label) or FALLBACK_COLORS[i % len(FALLBACK_COLORS)]
            pts = [
                f"{_fmt(px(x))},{_fmt(py(self._ty(y)))}"
                for x, y in zip(s.x, s.y)
                if math.isfinite(y) and (y > 0 or not self.log_y)
            ]
            if not pts:
                continue
            dash = ' stroke-dasharray="5,3"' if s.dashed else ""
            out.append(
                f'<polyline class="series" data-label="{escape(s.label)}" fill="none" stroke="{color}" '
                f'stroke-width="1.8"{dash} points="{" ".join(pts)}"/>'
            )
            ly = self.margin_top + 10 + 18 * i
            lx = self.width - self.margin_right + 12
            out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 26}" y="{ly}" dominant-baseline="middle">{escape(s.label)}</text>')
        for x, label in self.vlines:
            X = _fmt(px(x))
            out.append(
                f'<line class="tipping" data-alpha="{x!r}" x1="{X}" y1="{_fmt(py(y0))}" x2="{X}" y2="{_fmt(py(y1))}" '
                f'stroke="#d62728" stroke-dasharray="4,3"/>'
            )
            out.append(f'<text x="{X}" y="{_fmt(py(y1) - 4)}" text-anchor="middle" fill="#d62728">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
