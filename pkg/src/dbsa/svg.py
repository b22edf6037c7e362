"""Minimal static SVG line charts built from CSV-ready arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class Panel:
    """One set of axes holding polylines.

    ``step`` series are drawn as right-continuous steps.
    """

    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)
    ylim: tuple | None = None

    def add(self, x, y, label: str = "", step: bool = False) -> "Panel":
        self.series.append((np.asarray(x, float), np.asarray(y, float), label, step))
        return self


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _limits(panel: Panel) -> tuple[float, float, float, float]:
    xs = np.concatenate([s[0][np.isfinite(s[0]) & np.isfinite(s[1])] for s in panel.series] or [np.zeros(1)])
    ys = np.concatenate([s[1][np.isfinite(s[0]) & np.isfinite(s[1])] for s in panel.series] or [np.zeros(1)])
    if xs.size == 0:
        xs = ys = np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = panel.ylim or (float(ys.min()), float(ys.max()))
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    return x0, x1, y0, y1


def _panel_svg(panel: Panel, left: float, top: float, width: float, height: float) -> list[str]:
    x0, x1, y0, y1 = _limits(panel)

    def sx(v):
        return left + (v - x0) / (x1 - x0) * width

    def sy(v):
        return top + height - (v - y0) / (y1 - y0) * height

    out = [f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(width)}" height="{_fmt(height)}" '
           'fill="none" stroke="#333"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_fmt(sx(t))}" y="{_fmt(top + height + 14)}" font-size="10" '
                   f'text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{_fmt(left - 4)}" y="{_fmt(sy(t) + 3)}" font-size="10" '
                   f'text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{_fmt(left + width / 2)}" y="{_fmt(top + height + 30)}" font-size="11" '
               f'text-anchor="middle">{panel.xlabel}</text>')
    out.append(f'<text x="{_fmt(left - 40)}" y="{_fmt(top + height / 2)}" font-size="11" '
               f'text-anchor="middle" transform="rotate(-90 {_fmt(left - 40)} '
               f'{_fmt(top + height / 2)})">{panel.ylabel}</text>')
    for i, (x, y, label, step) in enumerate(panel.series):
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        if x.size == 0:
            continue
        pts = []
        for j in range(x.size):
            if step and j > 0:
                pts.append((x[j], y[j - 1]))
            pts.append((x[j], y[j]))
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if label:
            out.append(f'<text x="{_fmt(left + width - 4)}" y="{_fmt(top + 14 + 12 * i)}" '
                       f'font-size="10" text-anchor="end" fill="{color}">{label}</text>')
    return out


def render(panels: Sequence[Panel], width: int = 520, panel_height: int = 220) -> str:
    """Stack ``panels`` vertically into one SVG document."""
    margin_l, margin_t, gap = 60, 16, 50
    inner_w = width - margin_l - 20
    total_h = margin_t + len(panels) * (panel_height + gap)
    body = []
    for i, p in enumerate(panels):
        body += _panel_svg(p, margin_l, margin_t + i * (panel_height + gap), inner_w, panel_height)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{math.ceil(total_h)}" '
            f'viewBox="0 0 {width} {math.ceil(total_h)}">\n' + "\n".join(body) + "\n</svg>\n")
