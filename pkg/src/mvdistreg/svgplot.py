"""Self-contained SVG line plots (no plotting dependency).

Good enough for the study reports and slice plots: line series, optional
shaded bands, axes with tick labels.  Output is deterministic for fixed
input, which keeps report files byte-identical across reruns.
"""

from __future__ import annotations

import numpy as np

__all__ = ["line_plot_svg"]

_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 64, 16, 34, 46


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return raw


def line_plot_svg(path, x, series, title="", xlabel="", ylabel=""):
    """Write a line plot.

    ``series`` is a list of dicts: {"y": array, "label": str,
    "band": (lo, hi) optional, "dashed": bool optional}.
    """
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(s["y"], dtype=float) for s in series]
    all_y = np.concatenate(
        [y[np.isfinite(y)] for y in ys]
        + [
            np.asarray(b, dtype=float).ravel()
            for s in series
            if s.get("band") is not None
            for b in s["band"]
        ]
    )
    if all_y.size == 0:
        all_y = np.array([0.0, 1.0])
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(v):
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    # axes
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
        'stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
        'stroke="black" stroke-width="1"/>'
    )
    for tx in _ticks(x_lo, x_hi):
        px = sx(tx)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{_H - _MB}" x2="{_fmt(px)}" y2="{_H - _MB + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="{_H - _MB + 18}" font-size="11" text-anchor="middle">{_fmt(tx)}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        py = sy(ty)
        parts.append(
            f'<line x1="{_ML - 4}" y1="{_fmt(py)}" x2="{_ML}" y2="{_fmt(py)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_ML - 8}" y="{_fmt(py + 4)}" font-size="11" text-anchor="end">{_fmt(ty)}</text>'
        )
    if title:
        parts.append(
            f'<text x="{_W / 2}" y="20" font-size="14" text-anchor="middle">{title}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 8}" font-size="12" text-anchor="middle">{xlabel}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="14" y="{(_MT + _H - _MB) / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 14 {(_MT + _H - _MB) / 2})">{ylabel}</text>'
        )

    for i, s in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        band = s.get("band")
        if band is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in band)
            pts = [f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, hi)]
            pts += [f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[::-1], lo[::-1])]
            parts.append(
                f'<polygon points="{" ".join(pts)}" fill="{color}" opacity="0.18" stroke="none"/>'
            )
        y = np.asarray(s["y"], dtype=float)
        keep = np.isfinite(y)
        pts = " ".join(
            f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[keep], y[keep])
        )
        dash = ' stroke-dasharray="6 4"' if s.get("dashed") else ""
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>'
        )
        label = s.get("label")
        if label:
            ly = _MT + 14 + 14 * i
            parts.append(
                f'<line x1="{_W - _MR - 120}" y1="{ly - 4}" x2="{_W - _MR - 96}" y2="{ly - 4}" '
                f'stroke="{color}" stroke-width="2"{dash}/>'
            )
            parts.append(
                f'<text x="{_W - _MR - 90}" y="{ly}" font-size="11">{label}</text>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
