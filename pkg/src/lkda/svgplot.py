"""Dependency-free SVG line charts.

Each series is drawn as exactly one ``<path>`` element; axes, ticks and the
legend use ``<line>``, ``<rect>`` and ``<text>`` only, so callers can count
series by counting paths.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

Series = tuple[str, Sequence[float], Sequence[float]]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def line_chart(series: Sequence[Series], title: str = "", x_label: str = "", y_label: str = "",
               y_range: tuple[float, float] | None = None, width: int = 640, height: int = 420) -> str:
    """Render ``(name, xs, ys)`` series to an SVG document string."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    for name, xs, ys in series:
        if len(xs) != len(ys) or not xs:
            raise ValueError(f"series {name!r} needs equal-length, nonempty x and y")

    left, right, top, bottom = 64, 150, 40, 56
    pw, ph = width - left - right, height - top - bottom
    all_x = [float(x) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = y_range if y_range is not None else (min(all_y), max(all_y))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="24" text-anchor="middle" font-size="15">'
                   f'{escape(title)}</text>')
    # axes
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#000"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="#000"/>')
    for t in _ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="#000"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">{t:.2g}</text>')
    for t in _ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="#000"/>')
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#eeeeee"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{t:.2f}</text>')
    if x_label:
        out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 14}" text-anchor="middle" font-size="12">'
                   f'{escape(x_label)}</text>')
    if y_label:
        out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
                   f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(y_label)}</text>')

    for i, (name, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        d = " ".join(f"{'M' if j == 0 else 'L'}{px(float(x)):.2f},{py(float(y)):.2f}"
                     for j, (x, y) in enumerate(zip(xs, ys)))
        out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="2">'
                   f'<title>{escape(name)}</title></path>')
        ly = top + 12 + 20 * i
        lx = left + pw + 16
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 28}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_chart(path, series: Sequence[Series], **kwargs) -> None:
    Path(path).write_text(line_chart(series, **kwargs))
