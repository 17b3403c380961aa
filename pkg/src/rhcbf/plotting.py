"""SVG output: step-count scatter grids and ``h = 0`` contours on the swing slice.

Everything is written as plain SVG text with fixed number formatting so the
bytes depend only on the inputs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from skimage.measure import find_contours

STANCE_SLICE = (0.0, 0.4)  # (theta_stance, dtheta_stance) held fixed on the slice

# viridis anchor colors, interpolated linearly
_VIRIDIS = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=float)


def colormap(x) -> list:
    """Hex colors for values in [0, 1]."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    pos = x * (len(_VIRIDIS) - 1)
    i = np.minimum(pos.astype(int), len(_VIRIDIS) - 2)
    w = (pos - i)[:, None]
    rgb = np.rint((1 - w) * _VIRIDIS[i] + w * _VIRIDIS[i + 1]).astype(int)
    return ["#%02x%02x%02x" % tuple(c) for c in rgb]


def level_set(values, xs, ys, level: float = 0.0) -> list:
    """Marching-squares polylines of ``values[i, j] = f(xs[i], ys[j])`` at ``level``.

    Returns a list of (k, 2) arrays in data coordinates.
    """
    V = np.asarray(values, dtype=float)
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if V.shape != (len(xs), len(ys)):
        raise ValueError("values must have shape (len(xs), len(ys))")
    out = []
    for c in find_contours(V, level):
        x = np.interp(c[:, 0], np.arange(len(xs)), xs)
        y = np.interp(c[:, 1], np.arange(len(ys)), ys)
        out.append(np.column_stack([x, y]))
    return out


def slice_states(xs, ys, stance=STANCE_SLICE) -> np.ndarray:
    """Walker states ``[stance angle, swing angle, stance rate, swing rate]`` on the swing grid."""
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    Z = np.empty(X.shape + (4,))
    Z[..., 0], Z[..., 2] = stance
    Z[..., 1], Z[..., 3] = X, Y
    return Z


def slice_contour(h, xlim, ylim, resolution: float, stance=STANCE_SLICE, level: float = 0.0) -> list:
    """``h = level`` curves of a barrier on the (swing angle, swing rate) slice."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    xs = np.arange(xlim[0], xlim[1] + 0.5 * resolution, resolution)
    ys = np.arange(ylim[0], ylim[1] + 0.5 * resolution, resolution)
    Z = slice_states(xs, ys, stance)
    f = h.forward if hasattr(h, "forward") else h
    V = np.asarray(f(Z.reshape(-1, 4)), dtype=float).reshape(len(xs), len(ys))
    return level_set(V, xs, ys, level)


class _Frame:
    """Maps data coordinates into a pixel box."""

    def __init__(self, xlim, ylim, x0, y0, w, h):
        self.xlim, self.ylim = xlim, ylim
        self.x0, self.y0, self.w, self.h = x0, y0, w, h

    def px(self, x, y):
        u = self.x0 + (np.asarray(x) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w
        v = self.y0 + self.h - (np.asarray(y) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h
        return u, v


def _f(v) -> str:
    return f"{float(v):.2f}"


def scatter_panel(frame: _Frame, x, y, c, vmax: float, title: str, contours: Sequence = (), radius: float = 3.0) -> list:
    parts = [f'<rect x="{_f(frame.x0)}" y="{_f(frame.y0)}" width="{_f(frame.w)}" height="{_f(frame.h)}" '
             'fill="none" stroke="#444"/>',
             f'<text x="{_f(frame.x0 + frame.w / 2)}" y="{_f(frame.y0 - 6)}" text-anchor="middle" '
             f'font-size="12">{title}</text>']
    cols = colormap(np.asarray(c, dtype=float) / max(vmax, 1e-12))
    u, v = frame.px(x, y)
    for ui, vi, col in zip(u, v, cols):
        parts.append(f'<circle cx="{_f(ui)}" cy="{_f(vi)}" r="{radius}" fill="{col}"/>')
    for line in contours:
        lu, lv = frame.px(line[:, 0], line[:, 1])
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(lu, lv))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.5"/>')
    return parts


def step_grid_svg(panels: dict, path, vmax: float, xlim, ylim, contours: Optional[dict] = None,
                  n_cols: Optional[int] = None, panel_size: float = 180.0) -> None:
    """Grid of scatter panels.

    ``panels`` maps ``(row label, column label)`` to ``(swing angles, swing rates, steps)``;
    ``contours`` maps a row label to the polylines drawn on every panel of that row.
    """
    if not panels:
        raise ValueError("nothing to plot")
    rows = list(dict.fromkeys(k[0] for k in panels))
    cols = list(dict.fromkeys(k[1] for k in panels))
    n_cols = len(cols) if n_cols is None else n_cols
    pad, left, top = 30.0, 90.0, 30.0
    W = left + len(cols) * (panel_size + pad) + 60
    H = top + len(rows) * (panel_size + pad) + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(W)}" height="{_f(H)}" font-family="sans-serif">',
           f'<rect width="{_f(W)}" height="{_f(H)}" fill="white"/>']
    for ri, r in enumerate(rows):
        y0 = top + ri * (panel_size + pad)
        out.append(f'<text x="10" y="{_f(y0 + panel_size / 2)}" font-size="12">{r}</text>')
        for ci, c in enumerate(cols):
            if (r, c) not in panels:
                continue
            x, y, s = panels[(r, c)]
            fr = _Frame(xlim, ylim, left + ci * (panel_size + pad), y0, panel_size, panel_size)
            lines = (contours or {}).get(r, ())
            out.extend(scatter_panel(fr, x, y, s, vmax, str(c), lines))
    # color bar
    bx = W - 40
    for k, col in enumerate(colormap(np.linspace(0, 1, 20))):
        out.append(f'<rect x="{_f(bx)}" y="{_f(top + (19 - k) * 8)}" width="10" height="8" fill="{col}"/>')
    out.append(f'<text x="{_f(bx)}" y="{_f(top + 175)}" font-size="10">0..{vmax:g}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def bar_chart_svg(values: dict, path, ylabel: str = "mean steps") -> None:
    """Grouped bars; ``values[group][series] = height``."""
    if not values:
        raise ValueError("nothing to plot")
    groups = list(values)
    series = list(dict.fromkeys(s for g in groups for s in values[g]))
    vmax = max(v for g in groups for v in values[g].values()) or 1.0
    bw, gap, left, top, hgt = 14.0, 20.0, 60.0, 20.0, 200.0
    W = left + len(groups) * (len(series) * bw + gap) + 120
    H = top + hgt + 50
    cols = colormap(np.linspace(0, 1, max(len(series), 2)))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(W)}" height="{_f(H)}" font-family="sans-serif">',
           f'<rect width="{_f(W)}" height="{_f(H)}" fill="white"/>',
           f'<text x="10" y="{_f(top + hgt / 2)}" font-size="11">{ylabel}</text>']
    for gi, g in enumerate(groups):
        gx = left + gi * (len(series) * bw + gap)
        for si, s in enumerate(series):
            v = values[g].get(s)
            if v is None:
                continue
            bh = hgt * v / vmax
            out.append(f'<rect x="{_f(gx + si * bw)}" y="{_f(top + hgt - bh)}" width="{_f(bw - 2)}" '
                       f'height="{_f(bh)}" fill="{cols[si]}"/>')
        out.append(f'<text x="{_f(gx)}" y="{_f(top + hgt + 15)}" font-size="10">{g}</text>')
    for si, s in enumerate(series):
        lx = W - 110
        out.append(f'<rect x="{_f(lx)}" y="{_f(top + si * 14)}" width="10" height="10" fill="{cols[si]}"/>')
        out.append(f'<text x="{_f(lx + 14)}" y="{_f(top + si * 14 + 9)}" font-size="10">{s}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
