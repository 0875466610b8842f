"""Dependency-free SVG line plots with confidence bands."""
from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["Series", "line_plot_svg"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


@dataclass
class Series:
    name: str
    xs: list[float]
    ys: list[float]
    lo: list[float] | None = None  # lower CI band
    hi: list[float] | None = None


@dataclass
class _Axis:
    lo: float
    hi: float
    log: bool

    def place(self, v: float, px_lo: float, px_hi: float) -> float:
        a, b, x = self.lo, self.hi, v
        if self.log:
            a, b, x = math.log10(a), math.log10(b), math.log10(max(v, 1e-300))
        if b == a:
            return 0.5 * (px_lo + px_hi)
        return px_lo + (x - a) / (b - a) * (px_hi - px_lo)

    def ticks(self, n: int = 5) -> list[float]:
        if self.log:
            lo, hi = math.log10(self.lo), math.log10(self.hi)
            return [10 ** (lo + i * (hi - lo) / (n - 1)) for i in range(n)]
        return [self.lo + i * (self.hi - self.lo) / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1000 or abs(v) < 0.01:
        return f"{v:.1e}"
    return f"{v:.3g}"


def line_plot_svg(
    path: str,
    series: list[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
    log_y: bool = False,
    width: int = 640,
    height: int = 440,
) -> None:
    """Write a self-contained SVG: axes, tick labels, CI polygons, legend."""
    if not series or not any(s.xs for s in series):
        raise ValueError("nothing to plot")
    xs_all = [x for s in series for x in s.xs]
    ys_all = [y for s in series for y in s.ys]
    for s in series:
        if s.lo is not None:
            ys_all += [v for v in s.lo if math.isfinite(v)]
        if s.hi is not None:
            ys_all += [v for v in s.hi if math.isfinite(v)]
    ys_all = [y for y in ys_all if math.isfinite(y)]

    def bounds(vals, log):
        lo, hi = min(vals), max(vals)
        if log:
            lo = max(lo, 1e-12)
            hi = max(hi, lo * 10)
            return lo / 1.3, hi * 1.3
        pad = 0.08 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.1
        return lo - pad, hi + pad

    ax = _Axis(*bounds(xs_all, log_x), log_x)
    ay = _Axis(*bounds(ys_all, log_y), log_y)

    m_left, m_right, m_top, m_bot = 70, 20, 40, 55
    px0, px1 = m_left, width - m_right
    py0, py1 = height - m_bot, m_top  # y grows downward in SVG

    def xy(x, y):
        return ax.place(x, px0, px1), ay.place(y, py0, py1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]

    for tx in ax.ticks():
        px, _ = xy(tx, ys_all[0])
        out.append(
            f'<line x1="{px:.1f}" y1="{py0}" x2="{px:.1f}" y2="{py1}" stroke="#eee"/>'
        )
        out.append(
            f'<text x="{px:.1f}" y="{py0 + 18}" text-anchor="middle">{_fmt(tx)}</text>'
        )
    for ty in ay.ticks():
        _, py = xy(xs_all[0], ty)
        out.append(
            f'<line x1="{px0}" y1="{py:.1f}" x2="{px1}" y2="{py:.1f}" stroke="#eee"/>'
        )
        out.append(
            f'<text x="{px0 - 8}" y="{py + 4:.1f}" text-anchor="end">{_fmt(ty)}</text>'
        )
    out.append(
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>'
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>'
    )
    out.append(
        f'<text x="{(px0 + px1) / 2}" y="{height - 12}" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="16" y="{(py0 + py1) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(py0 + py1) / 2})">{ylabel}</text>'
    )

    for i, s in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        if s.lo is not None and s.hi is not None:
            band = [
                (x, lo)
                for x, lo in zip(s.xs, s.lo)
                if math.isfinite(lo)
            ] + [
                (x, hi)
                for x, hi in reversed(list(zip(s.xs, s.hi)))
                if math.isfinite(hi)
            ]
            if len(band) >= 3:
                pts = " ".join(f"{xy(x, y)[0]:.1f},{xy(x, y)[1]:.1f}" for x, y in band)
                out.append(
                    f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>'
                )
        pts = " ".join(f"{xy(x, y)[0]:.1f},{xy(x, y)[1]:.1f}" for x, y in zip(s.xs, s.ys))
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for x, y in zip(s.xs, s.ys):
            cx, cy = xy(x, y)
            out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="{color}"/>')
        ly = m_top + 16 * i
        out.append(
            f'<line x1="{px1 - 130}" y1="{ly}" x2="{px1 - 105}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{px1 - 100}" y="{ly + 4}">{s.name}</text>'
        )

    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out))
