"""Minimal dependency-free SVG line charts and heatmaps."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
W, H, PAD = 480, 320, 48


def _scale(v, lo, hi, a, b):
    if hi == lo:
        return (a + b) / 2
    return a + (v - lo) * (b - a) / (hi - lo)


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]],
               title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(0.0, min(ys)), max(ys)) if ys else (0.0, 1.0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{PAD}" y="{H - PAD + 16}" text-anchor="middle">{x0:g}</text>',
           f'<text x="{W - PAD}" y="{H - PAD + 16}" text-anchor="middle">{x1:g}</text>',
           f'<text x="{PAD - 4}" y="{PAD}" text-anchor="end">{y1:.3g}</text>',
           f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end">{y0:.3g}</text>']
    for k, (name, (xv, yv)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{_scale(x, x0, x1, PAD, W - PAD):.2f},"
                       f"{_scale(y, y0, y1, H - PAD, PAD):.2f}" for x, y in zip(xv, yv))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 16 * k}" fill="{color}" '
                   f'font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(counts: Sequence[Sequence[int]], title: str = "",
                xlabel: str = "output length bin", ylabel: str = "completion time bin") -> str:
    rows = len(counts)
    cols = len(counts[0]) if rows else 0
    peak = max((c for row in counts for c in row), default=0) or 1
    cw = (W - 2 * PAD) / max(cols, 1)
    ch = (H - 2 * PAD) / max(rows, 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for i, row in enumerate(counts):
        for j, c in enumerate(row):
            shade = int(255 - 255 * c / peak)
            out.append(f'<rect x="{PAD + j * cw:.2f}" y="{PAD + i * ch:.2f}" '
                       f'width="{cw:.2f}" height="{ch:.2f}" '
                       f'fill="rgb({shade},{shade},255)"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
