"""Density fields: analytic or sampled, with total off-support evaluation.

A density is evaluable at every point of the plane.  Outside its support
region the value at the nearest boundary point is used (constant normal
extension), and the result is clamped to [floor, ceiling].  The Newton
iteration probes gradients well outside the target set early on, so the
extension keeps the right-hand side f/g(grad u) finite and Lipschitz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import TargetBoundary


@dataclass
class Density:
    kind: str  # "analytic" | "sampled"
    fn: object = None
    support: TargetBoundary | None = None
    floor: float = 0.0
    ceiling: float = math.inf
    grad_fn: object = None
    samples: np.ndarray | None = None
    rect: tuple | None = None  # (x1min, x1max, x2min, x2max) of the sample grid

    def _raw(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "analytic":
            return np.asarray(self.fn(pts[..., 0], pts[..., 1]), dtype=float)
        return _bilinear(self.samples, self.rect, pts)

    def evaluate(self, pts) -> np.ndarray:
        """Density at arbitrary points; total by construction."""
        pts = np.asarray(pts, dtype=float)
        scalar = pts.ndim == 1
        P = pts.reshape(-1, 2)
        if self.support is not None:
            inside = self.support.contains_many(P)
            if not inside.all():
                P = P.copy()
                P[~inside] = self.support.project_many(P[~inside])
        vals = self._raw(P)
        vals = np.clip(vals, self.floor, self.ceiling)
        return float(vals[0]) if scalar else vals.reshape(pts.shape[:-1])

    def gradient(self, pts, step: float = 1e-7) -> np.ndarray:
        """Gradient of the extended, clamped field.

        Uses the analytic gradient when one is attached and there is no
        support extension in play; otherwise central differences of
        evaluate(), which stay bounded across the extension kinks.
        """
        pts = np.asarray(pts, dtype=float)
        if self.grad_fn is not None and self.support is None and not np.isfinite(self.ceiling):
            g = np.asarray(self.grad_fn(pts[..., 0], pts[..., 1]), dtype=float)
            return np.moveaxis(g, 0, -1) if g.shape[0] == 2 and g.shape != pts.shape else g
        e1 = np.array([step, 0.0])
        e2 = np.array([0.0, step])
        g1 = (self.evaluate(pts + e1) - self.evaluate(pts - e1)) / (2 * step)
        g2 = (self.evaluate(pts + e2) - self.evaluate(pts - e2)) / (2 * step)
        return np.stack([g1, g2], axis=-1)

    def scaled(self, s: float) -> "Density":
        if self.kind == "analytic":
            fn = self.fn
            d = Density("analytic", fn=lambda x, y, _f=fn: s * _f(x, y),
                        support=self.support, floor=s * self.floor,
                        ceiling=s * self.ceiling if np.isfinite(self.ceiling) else math.inf)
            if self.grad_fn is not None:
                gf = self.grad_fn
                d.grad_fn = lambda x, y, _g=gf: tuple(s * c for c in _g(x, y))
            return d
        return Density("sampled", samples=self.samples * s, rect=self.rect,
                       support=self.support, floor=s * self.floor,
                       ceiling=s * self.ceiling if np.isfinite(self.ceiling) else math.inf)


def _bilinear(samples: np.ndarray, rect, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation with coordinates clamped to the sample rectangle.

    Clamping implements the constant normal extension for gridded data.
    """
    x1min, x1max, x2min, x2max = rect
    m1, m2 = samples.shape
    s = (pts[..., 0] - x1min) / (x1max - x1min) * (m1 - 1)
    t = (pts[..., 1] - x2min) / (x2max - x2min) * (m2 - 1)
    s = np.clip(s, 0, m1 - 1)
    t = np.clip(t, 0, m2 - 1)
    i0 = np.clip(np.floor(s).astype(int), 0, m1 - 2)
    j0 = np.clip(np.floor(t).astype(int), 0, m2 - 2)
    ds = s - i0
    dt = t - j0
    v = (samples[i0, j0] * (1 - ds) * (1 - dt)
         + samples[i0 + 1, j0] * ds * (1 - dt)
         + samples[i0, j0 + 1] * (1 - ds) * dt
         + samples[i0 + 1, j0 + 1] * ds * dt)
    return v


def analytic_density(fn, support: TargetBoundary | None = None, floor: float = 0.0,
                     ceiling: float = math.inf, grad=None) -> Density:
    return Density("analytic", fn=fn, support=support, floor=floor, ceiling=ceiling, grad_fn=grad)


def constant_density(value: float, support: TargetBoundary | None = None) -> Density:
    return analytic_density(lambda x, y: np.full_like(np.asarray(x, dtype=float), value),
                            support=support, grad=lambda x, y: (np.zeros_like(x), np.zeros_like(y)))


def indicator_density(region: TargetBoundary, value: float = 1.0) -> Density:
    """value inside the region, zero outside (source densities of embedded problems)."""

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        pts = np.stack([x, np.asarray(y, dtype=float)], axis=-1).reshape(-1, 2)
        inside = region.contains_many(pts)
        return (value * inside).reshape(x.shape)

    return Density("analytic", fn=fn)


def sampled_density(samples: np.ndarray, rect, support: TargetBoundary | None = None,
                    floor: float = 0.0) -> Density:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("sample grid must be 2-D")
    return Density("sampled", samples=samples, rect=tuple(rect), support=support, floor=floor)


def load_image_density(pixels: np.ndarray, rect, n: int) -> Density:
    """Grayscale pixel grid -> density on an n x n grid over rect.

    Pixels are bilinearly resampled and offset by 1e-3 of the mean so the
    density stays strictly positive.
    """
    pixels = np.asarray(pixels, dtype=float)
    if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
        raise ValueError("image must be a square grayscale grid")
    if np.any(pixels < 0):
        raise ValueError("pixel values must be nonnegative")
    mean = pixels.mean()
    if mean == 0:
        raise ValueError("all-zero image")
    x1min, x1max, x2min, x2max = rect
    xs = np.linspace(x1min, x1max, n)
    ys = np.linspace(x2min, x2max, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    vals = _bilinear(pixels, rect, pts) + 1e-3 * mean
    return sampled_density(vals, rect)


def read_pgm(path) -> np.ndarray:
    """Read a portable graymap (P2 ascii or P5 binary); returns row-major
    (x1, x2)-indexed float array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif data[i:i + 1].isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    magic = tokens[0]
    w, h, maxv = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        i += 1  # single whitespace after maxval
        dtype = np.uint8 if maxv < 256 else ">u2"
        arr = np.frombuffer(data[i:], dtype=dtype, count=w * h).reshape(h, w)
    elif magic == b"P2":
        arr = np.array(data[i:].split()[: w * h], dtype=float).reshape(h, w)
    else:
        raise ValueError(f"not a PGM file (magic {magic!r})")
    return np.asarray(arr, dtype=float).T  # (column, row) -> (x1, x2)


def write_pgm(path, values: np.ndarray, maxval: int = 255, binary: bool = True):
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo) * maxval
    img = np.rint(scaled).astype(np.uint8 if maxval < 256 else np.uint16).T  # back to (row, col)
    h, w = img.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            fh.write(img.astype(">u2").tobytes() if maxval >= 256 else img.tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n{maxval}\n".encode())
            for row in img:
                fh.write((" ".join(str(int(x)) for x in row) + "\n").encode())


def mass_on_grid(density: Density, grid) -> float:
    """Sum of nodal values times cell area over the solver grid."""
    vals = density.evaluate(np.stack([grid.X1, grid.X2], axis=-1))
    return float(vals.sum() * grid.h ** 2)


def mass_on_support(density: Density, h: float) -> float:
    """Lattice sum of the density over its support region at spacing ~h.

    Uses a uniform lattice over the support bounding box with the node count
    chosen so the spacing matches h; for a rectangular support spanning the
    solver square this reproduces the solver-grid sum exactly.
    """
    if density.support is None:
        raise ValueError("density has no support region to integrate over")
    lo, hi = density.support.bbox()
    m1 = max(int(round((hi[0] - lo[0]) / h)) + 1, 4)
    m2 = max(int(round((hi[1] - lo[1]) / h)) + 1, 4)
    xs = np.linspace(lo[0], hi[0], m1)
    ys = np.linspace(lo[1], hi[1], m2)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
    inside = density.support.contains_many(pts)
    vals = np.clip(density._raw(pts), density.floor, density.ceiling)
    return float((vals * inside).sum() * cell)


def normalize_mass(f: Density, g: Density, grid):
    """Scale g so the discrete masses balance; returns (f, g_scaled, scale)."""
    mf = mass_on_grid(f, grid)
    if mf <= 0:
        raise ValueError("source density has zero total mass")
    mg = mass_on_support(g, grid.h) if g.support is not None else mass_on_grid(g, grid)
    if mg <= 0:
        raise ValueError("target density has zero total mass")
    s = mf / mg
    return f, g.scaled(s), s


def regularize_singular(density: Density, h: float, probe_n: int = 1024) -> Density:
    """Cap a density that blows up at a point by an O(1/h^2) ceiling.

    The probe locates the peak, refines it locally, and sets the ceiling to
    the largest value on a ring of radius h^2 around it, so the clamped
    region has area about pi h^4 (well under the 4 h^2 budget).  Bounded
    densities are returned with only the floor applied.
    """
    if density.support is not None:
        lo, hi = density.support.bbox()
    elif density.rect is not None:
        x1min, x1max, x2min, x2max = density.rect
        lo, hi = np.array([x1min, x2min]), np.array([x1max, x2max])
    else:
        raise ValueError("cannot infer a probe region")

    def probe(center, half, m):
        xs = np.linspace(center[0] - half, center[0] + half, m)
        ys = np.linspace(center[1] - half, center[1] + half, m)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = density._raw(pts)
        vals = np.where(np.isfinite(vals), vals, np.inf)
        k = int(np.nanargmax(vals))
        return pts.reshape(-1, 2)[k], float(vals.ravel()[k]), vals

    center = 0.5 * (lo + hi)
    half = 0.5 * float(max(hi - lo))
    ystar, vmax, vals = probe(center, half, probe_n)
    mean = float(np.mean(np.where(np.isfinite(vals), vals, 0.0)))
    span = 2 * half / (probe_n - 1)
    for _ in range(6):  # zoom in on the peak
        span *= 0.1
        ystar, vmax, _ = probe(ystar, span, 33)

    th = 2 * math.pi * np.arange(64) / 64
    ring = ystar + (h * h) * np.stack([np.cos(th), np.sin(th)], axis=1)
    ring_max = float(np.max(density._raw(ring)))
    floor = max(density.floor, 1e-6 * mean)
    ceiling = ring_max if vmax > 1.05 * ring_max else math.inf
    out = Density(density.kind, fn=density.fn, support=density.support,
                  floor=floor, ceiling=ceiling, grad_fn=density.grad_fn,
                  samples=density.samples, rect=density.rect)
    return out
