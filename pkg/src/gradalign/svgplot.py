"""Tiny dependency-free SVG line charts for optional --plot output."""

from __future__ import annotations

from typing import Mapping, Sequence

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_chart(
    path: str,
    series: Mapping[str, Sequence[tuple[float, float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    width: int = 720,
    height: int = 440,
) -> None:
    """Write one self-contained SVG with a polyline per series."""
    margin = 60
    pts = [p for pts in series.values() for p in pts]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - 2 * margin, height - 2 * margin

    def sx(x: float) -> float:
        return margin + (x - x0) / (x1 - x0) * pw

    def sy(y: float) -> float:
        return height - margin - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{_esc(title)}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {height / 2})">{_esc(ylabel)}</text>',
    ]
    for tick in range(5):
        fx = x0 + (x1 - x0) * tick / 4
        fy = y0 + (y1 - y0) * tick / 4
        out.append(
            f'<text x="{sx(fx):.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="10">{fx:.3g}</text>'
        )
        out.append(
            f'<text x="{margin - 6}" y="{sy(fy):.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>'
        )
    for i, name in enumerate(sorted(series)):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in series[name])
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * i + 10}" font-size="11" '
            f'fill="{color}">{_esc(name)}</text>'
        )
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
