"""Minimal SVG emitters for 2-D worlds, angle histograms and COUT curves.

Plain string assembly keeps output byte-stable across runs and easy to
inspect: arrows are ``<line class="arrow">``, trajectories
``<polyline class="trajectory">``, histogram bars ``<rect class="bar">``.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
SIZE = 480
PAD = 30


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, lo, hi, title: str):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        span = np.where(self.hi - self.lo > 0, self.hi - self.lo, 1.0)
        self.scale = (SIZE - 2 * PAD) / span
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
            '<defs><marker id="head" markerWidth="8" markerHeight="8" refX="6" refY="3" orient="auto">'
            '<path d="M0,0 L6,3 L0,6 z" fill="#333"/></marker></defs>',
            f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>',
            f'<text x="{PAD}" y="18" font-size="12" font-family="sans-serif">{escape(title)}</text>',
        ]

    def xy(self, p) -> tuple[float, float]:
        x = PAD + (p[0] - self.lo[0]) * self.scale[0]
        y = SIZE - PAD - (p[1] - self.lo[1]) * self.scale[1]
        return x, y

    def add(self, s: str) -> None:
        self.parts.append(s)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(
    samples: np.ndarray,
    labels: np.ndarray,
    predict_grid=None,
    arrows: list[tuple[np.ndarray, np.ndarray]] = (),
    trajectories: list[np.ndarray] = (),
    title: str = "",
    grid: int = 48,
) -> str:
    """2-D scatter with optional decision regions, factual->counterfactual arrows and paths.

    ``predict_grid`` maps an ``(N, 2)`` latent array to class indices.
    """
    pts = [np.asarray(samples)]
    pts += [np.asarray(a) for pair in arrows for a in pair]
    pts += [np.asarray(t) for t in trajectories]
    allp = np.vstack([p.reshape(-1, 2) for p in pts])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    margin = 0.05 * (hi - lo) + 1e-9
    lo, hi = lo - margin, hi + margin
    cv = _Canvas(lo, hi, title)
    if predict_grid is not None:
        gx = np.linspace(lo[0], hi[0], grid + 1)
        gy = np.linspace(lo[1], hi[1], grid + 1)
        cx, cy = 0.5 * (gx[1:] + gx[:-1]), 0.5 * (gy[1:] + gy[:-1])
        mesh = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
        pred = np.asarray(predict_grid(mesh)).reshape(grid, grid)
        w = (hi[0] - lo[0]) / grid * cv.scale[0]
        h = (hi[1] - lo[1]) / grid * cv.scale[1]
        for iy in range(grid):
            for ix in range(grid):
                x, y = cv.xy((gx[ix], gy[iy + 1]))
                color = PALETTE[int(pred[iy, ix]) % len(PALETTE)]
                cv.add(f'<rect class="region" x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" fill="{color}" fill-opacity="0.12"/>')
    for p, c in zip(np.asarray(samples), np.asarray(labels)):
        x, y = cv.xy(p)
        cv.add(f'<circle class="sample" cx="{_fmt(x)}" cy="{_fmt(y)}" r="1.6" fill="{PALETTE[int(c) % len(PALETTE)]}" fill-opacity="0.5"/>')
    for path in trajectories:
        pts_s = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (cv.xy(p) for p in np.asarray(path)))
        cv.add(f'<polyline class="trajectory" points="{pts_s}" fill="none" stroke="#555" stroke-width="0.8"/>')
    for a, b in arrows:
        (x1, y1), (x2, y2) = cv.xy(a), cv.xy(b)
        cv.add(f'<line class="arrow" x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" stroke="#333" stroke-width="1" marker-end="url(#head)"/>')
    return cv.render()


def histogram_svg(edges, counts, title: str = "", threshold: float | None = None) -> str:
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    top = max(counts.max(), 1.0)
    cv = _Canvas((edges[0], 0.0), (edges[-1], top), title)
    for lo_e, hi_e, c in zip(edges[:-1], edges[1:], counts):
        x1, y1 = cv.xy((lo_e, c))
        x2, y2 = cv.xy((hi_e, 0.0))
        cv.add(f'<rect class="bar" x="{_fmt(x1)}" y="{_fmt(y1)}" width="{_fmt(x2 - x1)}" height="{_fmt(y2 - y1)}" fill="#1f77b4" data-count="{int(c)}"/>')
    if threshold is not None:
        (x, y1), (_, y2) = cv.xy((threshold, 0.0)), cv.xy((threshold, top))
        cv.add(f'<line class="threshold" x1="{_fmt(x)}" y1="{_fmt(y1)}" x2="{_fmt(x)}" y2="{_fmt(y2)}" stroke="#d62728" stroke-dasharray="4,3"/>')
    return cv.render()


def curves_svg(curves: list[tuple[np.ndarray, np.ndarray]], title: str = "") -> str:
    """Perturbation curves: per record, target-class and factual-class probabilities."""
    steps = max((len(c[0]) for c in curves), default=2) - 1
    cv = _Canvas((0.0, 0.0), (max(steps, 1), 1.0), title)
    for cf, f in curves:
        for series, color, cls in ((cf, PALETTE[1], "curve-cf"), (f, PALETTE[0], "curve-f")):
            t = np.arange(len(series)) * (steps / max(len(series) - 1, 1))
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (cv.xy(p) for p in zip(t, series)))
            cv.add(f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" stroke-opacity="0.4"/>')
    return cv.render()
