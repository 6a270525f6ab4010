"""Minimal dependency-free SVG line/scatter/bar plots."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _f(x: float) -> str:
    return f"{x:.2f}"


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


class Axes:
    """One plotting panel with data-to-pixel mapping."""

    def __init__(self, x0, y0, width, height, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.y0, self.w, self.h = x0, y0, width, height
        self.xlim, self.ylim = xlim, ylim
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.items: list[str] = []
        self.clip_id = "clip0"

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def line(self, xs, ys, color=PALETTE[0], width=1.5, dash=None):
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} points="{pts}"/>')

    def band(self, xs, lo, hi, color=PALETTE[0], opacity=0.2):
        upper = [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, hi)]
        lower = [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(reversed(xs), reversed(lo))]
        self.items.append(f'<polygon fill="{color}" fill-opacity="{opacity}" stroke="none" '
                          f'points="{" ".join(upper + lower)}"/>')

    def points(self, xs, ys, color=PALETTE[0], r=2.0):
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                self.items.append(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" r="{r}" '
                                  f'fill="{color}" fill-opacity="0.6"/>')

    def bars(self, edges, heights, color=PALETTE[0]):
        for a, b, v in zip(edges[:-1], edges[1:], heights):
            if not math.isfinite(v):
                continue
            top, base = self.py(v), self.py(self.ylim[0])
            self.items.append(f'<rect x="{_f(self.px(a))}" y="{_f(top)}" width="{_f(self.px(b) - self.px(a))}" '
                              f'height="{_f(base - top)}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>')

    def vline(self, x, color="#555555", dash="4,3"):
        if math.isfinite(x) and self.xlim[0] <= x <= self.xlim[1]:
            self.line([x, x], list(self.ylim), color=color, width=1.0, dash=dash)

    def text(self, x, y, s, size=11, anchor="start", color="#000000"):
        self.items.append(f'<text x="{_f(self.px(x))}" y="{_f(self.py(y))}" font-size="{size}" '
                          f'text-anchor="{anchor}" fill="{color}">{escape(s)}</text>')

    def legend(self, entries):
        for k, (label, color) in enumerate(entries):
            y = self.y0 + 14 + 16 * k
            x = self.x0 + 10
            self.items.append(f'<line x1="{_f(x)}" y1="{_f(y - 4)}" x2="{_f(x + 18)}" y2="{_f(y - 4)}" '
                              f'stroke="{color}" stroke-width="2"/>')
            self.items.append(f'<text x="{_f(x + 24)}" y="{_f(y)}" font-size="11">{escape(label)}</text>')

    def render(self) -> str:
        out = [f'<rect x="{_f(self.x0)}" y="{_f(self.y0)}" width="{_f(self.w)}" height="{_f(self.h)}" '
               f'fill="none" stroke="#000000"/>']
        for t in nice_ticks(*self.xlim):
            x = self.px(t)
            out.append(f'<line x1="{_f(x)}" y1="{_f(self.y0 + self.h)}" x2="{_f(x)}" y2="{_f(self.y0 + self.h + 4)}" stroke="#000000"/>')
            out.append(f'<text x="{_f(x)}" y="{_f(self.y0 + self.h + 16)}" font-size="10" text-anchor="middle">{t:g}</text>')
        for t in nice_ticks(*self.ylim):
            y = self.py(t)
            out.append(f'<line x1="{_f(self.x0 - 4)}" y1="{_f(y)}" x2="{_f(self.x0)}" y2="{_f(y)}" stroke="#000000"/>')
            out.append(f'<text x="{_f(self.x0 - 6)}" y="{_f(y + 3)}" font-size="10" text-anchor="end">{t:g}</text>')
        cx = self.x0 + self.w / 2
        out.append(f'<text x="{_f(cx)}" y="{_f(self.y0 - 8)}" font-size="12" text-anchor="middle">{escape(self.title)}</text>')
        out.append(f'<text x="{_f(cx)}" y="{_f(self.y0 + self.h + 32)}" font-size="11" text-anchor="middle">{escape(self.xlabel)}</text>')
        ly = self.y0 + self.h / 2
        out.append(f'<text x="{_f(self.x0 - 36)}" y="{_f(ly)}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 {_f(self.x0 - 36)} {_f(ly)})">{escape(self.ylabel)}</text>')
        clip = self.clip_id
        out.append(f'<clipPath id="{clip}"><rect x="{_f(self.x0)}" y="{_f(self.y0)}" '
                   f'width="{_f(self.w)}" height="{_f(self.h)}"/></clipPath>')
        out.append(f'<g clip-path="url(#{clip})">')
        out.extend(self.items)
        out.append("</g>")
        return "\n".join(out)


class Figure:
    def __init__(self, width: int = 480, height: int = 360):
        self.width, self.height = width, height
        self.axes: list[Axes] = []

    def add_axes(self, xlim, ylim, title="", xlabel="", ylabel="", box=None) -> Axes:
        """``box`` = (x0, y0, w, h) in pixels; defaults to the whole figure minus margins."""
        if box is None:
            box = (60, 30, self.width - 80, self.height - 75)
        if xlim[1] <= xlim[0]:
            xlim = (xlim[0] - 0.5, xlim[0] + 0.5)
        if ylim[1] <= ylim[0]:
            ylim = (ylim[0] - 0.5, ylim[0] + 0.5)
        ax = Axes(*box, tuple(xlim), tuple(ylim), title, xlabel, ylabel)
        ax.clip_id = f"clip{len(self.axes)}"
        self.axes.append(ax)
        return ax

    def to_string(self) -> str:
        body = "\n".join(ax.render() for ax in self.axes)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">\n'
                f'<rect width="100%" height="100%" fill="#ffffff"/>\n{body}\n</svg>\n')

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_string())
