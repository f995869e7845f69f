"""Minimal static SVG: cumulative-regret curves on a log-x axis and an oracle-call bar panel."""
from __future__ import annotations

import math
from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def downsample_log(t: np.ndarray, y: np.ndarray, points: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Keep about ``points`` samples spaced evenly in log t (always including the endpoints)."""
    if len(t) <= points:
        return t, y
    idx = np.unique(np.round(np.geomspace(1, len(t), points)).astype(int) - 1)
    return t[idx], y[idx]


def comparison_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], bars: dict[str, tuple[int, int]],
                   title: str = "Cumulative regret") -> str:
    """Two panels side by side: regret curves (left) and oracle calls on a log scale (right)."""
    W, Hh = 960, 420
    L = dict(x0=70, y0=40, w=520, h=320)
    R = dict(x0=680, y0=40, w=250, h=320)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}" '
           'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{Hh}" fill="white"/>',
           f'<text x="{L["x0"]}" y="22" font-size="14">{escape(title)}</text>']

    tmax = max((float(t[-1]) for t, _ in curves.values()), default=10.0)
    ymax = max((float(np.max(y)) for _, y in curves.values()), default=1.0) or 1.0
    lx_hi = math.log10(max(tmax, 10.0))

    def px(t):
        return L["x0"] + L["w"] * math.log10(max(t, 1.0)) / lx_hi

    def py(y):
        return L["y0"] + L["h"] * (1 - y / ymax)

    out.append(f'<rect x="{L["x0"]}" y="{L["y0"]}" width="{L["w"]}" height="{L["h"]}" fill="none" stroke="#444"/>')
    for k in range(int(math.floor(lx_hi)) + 1):
        x = px(10 ** k)
        out.append(f'<line x1="{_fmt(x)}" y1="{L["y0"] + L["h"]}" x2="{_fmt(x)}" y2="{L["y0"] + L["h"] + 4}" stroke="#444"/>')
        out.append(f'<text x="{_fmt(x)}" y="{L["y0"] + L["h"] + 16}" text-anchor="middle">1e{k}</text>')
    for v in _nice_ticks(0.0, ymax):
        y = py(v)
        out.append(f'<line x1="{L["x0"] - 4}" y1="{_fmt(y)}" x2="{L["x0"]}" y2="{_fmt(y)}" stroke="#444"/>')
        out.append(f'<text x="{L["x0"] - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{L["x0"] + L["w"] / 2}" y="{L["y0"] + L["h"] + 32}" text-anchor="middle">round t (log scale)</text>')
    for i, (label, (t, y)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(float(a)))},{_fmt(py(float(b)))}" for a, b in zip(t, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = L["y0"] + 14 + 14 * i
        out.append(f'<line x1="{L["x0"] + 8}" y1="{ly - 4}" x2="{L["x0"] + 24}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L["x0"] + 28}" y="{ly}">{escape(label)}</text>')

    out.append(f'<text x="{R["x0"]}" y="22" font-size="14">Oracle calls (log scale)</text>')
    out.append(f'<rect x="{R["x0"]}" y="{R["y0"]}" width="{R["w"]}" height="{R["h"]}" fill="none" stroke="#444"/>')
    vmax = max((max(e, p) for e, p in bars.values()), default=10)
    lv = math.log10(max(vmax, 10)) * 1.05
    n = max(1, len(bars))
    group = R["w"] / n
    for i, (label, (est, plan)) in enumerate(bars.items()):
        for j, (val, color) in enumerate(((est, "#4c72b0"), (plan, "#dd8452"))):
            hgt = R["h"] * math.log10(max(val, 1)) / lv
            x = R["x0"] + i * group + group * (0.15 + 0.35 * j)
            y = R["y0"] + R["h"] - hgt
            out.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(group * 0.33)}" height="{_fmt(hgt)}" fill="{color}"/>')
            out.append(f'<text x="{_fmt(x + group * 0.165)}" y="{_fmt(y - 3)}" text-anchor="middle">{val}</text>')
        out.append(f'<text x="{_fmt(R["x0"] + (i + 0.5) * group)}" y="{R["y0"] + R["h"] + 16}" '
                   f'text-anchor="middle">{escape(label)}</text>')
    out.append(f'<rect x="{R["x0"] + 8}" y="{R["y0"] + 6}" width="10" height="10" fill="#4c72b0"/>'
               f'<text x="{R["x0"] + 22}" y="{R["y0"] + 15}">estimation</text>')
    out.append(f'<rect x="{R["x0"] + 90}" y="{R["y0"] + 6}" width="10" height="10" fill="#dd8452"/>'
               f'<text x="{R["x0"] + 104}" y="{R["y0"] + 15}">planning</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
