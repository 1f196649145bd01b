"""Tiny software rasterizer for the experiment figures.

Renders straight into grayscale PGM files; no fonts, no dependencies.  The
CSVs written next to each plot are the authoritative record, these images
exist so a run can be eyeballed without external tooling.
"""

import numpy as np

from .fileio import write_pgm

FRAME = 0.55  # frame/axis shade on the white background


def new_canvas(h: int, w: int) -> np.ndarray:
    return np.ones((h, w))


def _splat(canvas, xs, ys, shade):
    h, w = canvas.shape
    xi = np.round(xs).astype(int)
    yi = np.round(ys).astype(int)
    keep = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    canvas[yi[keep], xi[keep]] = np.minimum(canvas[yi[keep], xi[keep]], shade)


def draw_polyline(canvas, xs, ys, shade: float) -> None:
    """Darken pixels along the segments; coordinates are pixel units."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    for k in range(len(xs) - 1):
        steps = int(max(abs(xs[k + 1] - xs[k]), abs(ys[k + 1] - ys[k]), 1)) * 2 + 1
        t = np.linspace(0.0, 1.0, steps)
        _splat(canvas, xs[k] + t * (xs[k + 1] - xs[k]), ys[k] + t * (ys[k + 1] - ys[k]), shade)


def _frame(canvas, pad):
    h, w = canvas.shape
    canvas[pad, pad : w - pad] = FRAME
    canvas[h - pad - 1, pad : w - pad] = FRAME
    canvas[pad : h - pad, pad] = FRAME
    canvas[pad : h - pad, w - pad - 1] = FRAME


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo
    if span <= 0:
        span = 1.0
    return out_lo + (np.asarray(vals, dtype=np.float64) - lo) / span * (out_hi - out_lo)


def line_plot(path, curves, size=(240, 360)) -> None:
    """Plot (xs, ys) curves on shared axes.

    ``curves`` is a sequence of (xs, ys); successive curves use darker to
    lighter shades in the order given.  y grows upward.
    """
    h, w = size
    pad = 12
    canvas = new_canvas(h, w)
    _frame(canvas, pad)
    allx = np.concatenate([np.asarray(c[0], dtype=np.float64) for c in curves])
    ally = np.concatenate([np.asarray(c[1], dtype=np.float64) for c in curves])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    shades = np.linspace(0.0, 0.45, max(len(curves), 1), endpoint=len(curves) > 1)
    for (xs, ys), shade in zip(curves, shades):
        px = _scale(xs, x0, x1, pad + 2, w - pad - 3)
        py = _scale(ys, y0, y1, h - pad - 3, pad + 2)
        draw_polyline(canvas, px, py, float(shade))
    write_pgm(path, canvas)


def violin_plot(path, groups, size=(240, 360)) -> None:
    """One mirrored density per group of samples, side by side."""
    h, w = size
    pad = 12
    canvas = new_canvas(h, w)
    _frame(canvas, pad)
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    flat = np.concatenate(groups)
    y0, y1 = float(flat.min()), float(flat.max())
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ys = np.linspace(y0, y1, h - 2 * pad - 4)
    slot = (w - 2 * pad - 4) / len(groups)
    half = 0.42 * slot
    for gi, samples in enumerate(groups):
        # silverman-style bandwidth, floored so singletons still render
        bw = max(1.06 * samples.std() * len(samples) ** -0.2, (y1 - y0) * 0.02)
        dens = np.exp(-0.5 * ((ys[:, None] - samples[None, :]) / bw) ** 2).sum(axis=1)
        dens = dens / dens.max() * half
        cx = pad + 2 + (gi + 0.5) * slot
        rows = _scale(ys, y0, y1, h - pad - 3, pad + 2).round().astype(int)
        for r, d in zip(rows, dens):
            lo, hi = int(round(cx - d)), int(round(cx + d))
            canvas[r, lo : hi + 1] = np.minimum(canvas[r, lo : hi + 1], 0.25)
        canvas[rows[np.argmin(np.abs(ys - np.median(samples)))], int(cx - half) : int(cx + half) + 1] = 0.0
    write_pgm(path, canvas)
