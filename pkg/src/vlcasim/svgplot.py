"""Minimal deterministic SVG line charts for scenario outputs.

No plotting dependency: the renderer lays out axes, 1-2-5 tick grids
(decade ticks on log axes), polylines, and a legend, and returns the SVG
document as a string. Output is byte-stable for identical inputs.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 16, 34, 46


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo, hi]
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks or [lo, hi]


def _log_ticks(lo: float, hi: float):
    d0 = math.ceil(math.log10(lo) - 1e-9)
    d1 = math.floor(math.log10(hi) + 1e-9)
    ticks = [10.0 ** d for d in range(d0, d1 + 1)]
    return ticks or [lo, hi]


def _fmt(v: float) -> str:
    if v == 0.0:
        return "0"
    a = abs(v)
    if 1e-3 <= a < 1e5:
        s = f"{v:.6g}"
    else:
        s = f"{v:.2e}"
    return s


def _esc(s: str) -> str:
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def line_chart(series: Sequence[tuple], title: str = "", xlabel: str = "",
               ylabel: str = "", logx: bool = False, logy: bool = False,
               width: int = 720, height: int = 440,
               ylim: Optional[tuple] = None) -> str:
    """Render (label, x, y) series to an SVG document string."""
    if not series:
        raise ValueError("need at least one series")
    cleaned = []
    for label, xs, ys in series:
        x = np.asarray(xs, dtype=float)
        y = np.asarray(ys, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("series x and y must be 1-d and equal length")
        keep = np.isfinite(x) & np.isfinite(y)
        if logx:
            keep &= x > 0.0
        if logy:
            keep &= y > 0.0
        cleaned.append((str(label), x[keep], y[keep]))
    pts = [(x, y) for _, x, y in cleaned if len(x)]
    if not pts:
        raise ValueError("no finite data points to plot")
    x_lo = min(float(x.min()) for x, _ in pts)
    x_hi = max(float(x.max()) for x, _ in pts)
    y_lo = min(float(y.min()) for _, y in pts)
    y_hi = max(float(y.max()) for _, y in pts)
    if ylim is not None:
        y_lo, y_hi = float(ylim[0]), float(ylim[1])
    if x_hi <= x_lo:
        x_hi = x_lo + (abs(x_lo) or 1.0) * 1e-3
    if y_hi <= y_lo:
        pad = (abs(y_lo) or 1.0) * 1e-3
        y_lo, y_hi = y_lo - pad, y_hi + pad
    if not logy and ylim is None:
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

    px0, px1 = _MARGIN_L, width - _MARGIN_R
    py0, py1 = height - _MARGIN_B, _MARGIN_T

    def to_px(v, lo, hi, p_lo, p_hi, log):
        if log:
            v, lo, hi = math.log10(v), math.log10(lo), math.log10(hi)
        return p_lo + (v - lo) / (hi - lo) * (p_hi - p_lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           '<g font-family="sans-serif" font-size="12" fill="#222">']
    if title:
        out.append(f'<text x="{(px0 + px1) / 2:.1f}" y="20" '
                   f'text-anchor="middle" font-size="14">{_esc(title)}</text>')

    xticks = _log_ticks(x_lo, x_hi) if logx else _nice_ticks(x_lo, x_hi)
    yticks = _log_ticks(y_lo, y_hi) if logy else _nice_ticks(y_lo, y_hi)
    for tv in xticks:
        if not x_lo <= tv <= x_hi:
            continue
        xp = to_px(tv, x_lo, x_hi, px0, px1, logx)
        out.append(f'<line x1="{xp:.1f}" y1="{py0}" x2="{xp:.1f}" '
                   f'y2="{py1}" stroke="#ddd" stroke-width="1"/>')
        out.append(f'<text x="{xp:.1f}" y="{py0 + 16}" '
                   f'text-anchor="middle">{_fmt(tv)}</text>')
    for tv in yticks:
        if not y_lo <= tv <= y_hi:
            continue
        yp = to_px(tv, y_lo, y_hi, py0, py1, logy)
        out.append(f'<line x1="{px0}" y1="{yp:.1f}" x2="{px1}" '
                   f'y2="{yp:.1f}" stroke="#ddd" stroke-width="1"/>')
        out.append(f'<text x="{px0 - 6}" y="{yp + 4:.1f}" '
                   f'text-anchor="end">{_fmt(tv)}</text>')
    out.append(f'<rect x="{px0}" y="{py1}" width="{px1 - px0}" '
               f'height="{py0 - py1}" fill="none" stroke="#444"/>')
    if xlabel:
        out.append(f'<text x="{(px0 + px1) / 2:.1f}" y="{height - 10}" '
                   f'text-anchor="middle">{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{(py0 + py1) / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {(py0 + py1) / 2:.1f})">'
                   f'{_esc(ylabel)}</text>')

    for idx, (label, x, y) in enumerate(cleaned):
        color = PALETTE[idx % len(PALETTE)]
        if len(x) == 0:
            continue
        yc = np.clip(y, y_lo, y_hi) if ylim is not None else y
        coords = " ".join(
            f"{to_px(float(xv), x_lo, x_hi, px0, px1, logx):.2f},"
            f"{to_px(float(yv), y_lo, y_hi, py0, py1, logy):.2f}"
            for xv, yv in zip(x, yc))
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
    ly = py1 + 14
    for idx, (label, _, _) in enumerate(cleaned):
        color = PALETTE[idx % len(PALETTE)]
        out.append(f'<line x1="{px1 - 150}" y1="{ly - 4}" x2="{px1 - 126}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{px1 - 120}" y="{ly}">{_esc(label)}</text>')
        ly += 16
    out.append("</g></svg>")
    return "\n".join(out) + "\n"
