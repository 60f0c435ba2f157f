"""Offline plot artifacts: a CSV of the series plus a static SVG line chart."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_series_csv(path: str | Path, x: Sequence[float], series: dict[str, Sequence[float]]) -> None:
    names = list(series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + names)
        for i, xv in enumerate(x):
            w.writerow([xv] + [repr(float(series[n][i])) for n in names])


def line_chart_svg(x: Sequence[float], series: dict[str, Sequence[float]], title: str,
                   width: int = 640, height: int = 360) -> str:
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()]) if ys else np.zeros(1)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    x_lo, x_hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def px(v):
        return pad_l + (v - x_lo) / (x_hi - x_lo) * (width - pad_l - pad_r)

    def py(v):
        return height - pad_b - (v - lo) / (hi - lo) * (height - pad_t - pad_b)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
             f'<text x="{pad_l - 4}" y="{py(hi) + 4:.1f}" text-anchor="end">{hi:.3g}</text>',
             f'<text x="{pad_l - 4}" y="{py(lo) + 4:.1f}" text-anchor="end">{lo:.3g}</text>',
             f'<text x="{pad_l}" y="{height - pad_b + 16}" text-anchor="middle">{x_lo:.6g}</text>',
             f'<text x="{width - pad_r}" y="{height - pad_b + 16}" text-anchor="middle">{x_hi:.6g}</text>']
    for k, (name, y) in enumerate(ys.items()):
        colour = _COLOURS[k % len(_COLOURS)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad_r - 4}" y="{pad_t + 14 * (k + 1)}" text-anchor="end" '
                     f'fill="{colour}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_plot(stem: str | Path, x: Sequence[float], series: dict[str, Sequence[float]], title: str) -> None:
    """Writes ``stem``.csv and ``stem``.svg."""
    stem = Path(stem)
    write_series_csv(stem.with_suffix(".csv"), x, series)
    stem.with_suffix(".svg").write_text(line_chart_svg(x, series, title))
