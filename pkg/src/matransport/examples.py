"""Built-in example catalog with exact-solution oracles and error metrics.

Rectangle-to-rectangle problems come with exact Neumann data (either from a
known optimal map or from the side-to-side correspondence of rectangle
targets) and need a single Neumann solve.  The remaining problems run the
full boundary-projection iteration, warm-started from a coarser grid.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .density import (
    Density,
    analytic_density,
    constant_density,
    load_image_density,
    normalize_mass,
    regularize_singular,
)
from .geometry import ConvexPolygon, Disc, Ellipse, PolylineRegion, Rectangle
from .newton import NeumannData, SolveReport, solve_ma_neumann
from .transport import (
    OuterReport,
    SolveContext,
    TransportProblem,
    coarse_to_fine,
    containment_excess,
    folded_cell_count,
    init_boundary_data,
    invert_map,
    make_initial_state,
    transport_solve,
)

SQUARE = (-0.5, 0.5, -0.5, 0.5)
UNIT_SQUARE = (0.0, 1.0, 0.0, 1.0)

EXAMPLE_NAMES = (
    "gaussian", "q_forward", "q_inverse", "blowup", "image_pair",
    "ellipse", "half_circles", "polygon_forward", "polygon_inverse",
    "nonconvex_sine",
)

PAPER_N_LIST = (32, 46, 64, 90, 128, 182, 256, 362)


# -- exact solutions ----------------------------------------------------------


def exact_gaussian_map(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return np.stack([pts[..., 0] + 1.0, 0.5 * pts[..., 1]], axis=-1)


def q_fn(z):
    z = np.asarray(z, dtype=float)
    pi = math.pi
    return ((-z ** 2 / (8 * pi) + 1 / (256 * pi ** 3) + 1 / (32 * pi)) * np.cos(8 * pi * z)
            + z * np.sin(8 * pi * z) / (32 * pi ** 2))


def q_prime(z):
    z = np.asarray(z, dtype=float)
    return (z ** 2 - 0.25) * np.sin(8 * math.pi * z)


def q_second(z):
    z = np.asarray(z, dtype=float)
    pi = math.pi
    return 2 * z * np.sin(8 * pi * z) + 8 * pi * (z ** 2 - 0.25) * np.cos(8 * pi * z)


def q_density_fn(x1, x2):
    qa, qb = q_fn(x1), q_fn(x2)
    qa2, qb2 = q_second(x1), q_second(x2)
    qa1, qb1 = q_prime(x1), q_prime(x2)
    return (1.0 + 4.0 * (qa2 * qb + qa * qb2)
            + 16.0 * (qa * qb * qa2 * qb2 - qa1 ** 2 * qb1 ** 2))


def exact_q_map(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    x1, x2 = pts[..., 0], pts[..., 1]
    return np.stack([x1 + 4 * q_prime(x1) * q_fn(x2),
                     x2 + 4 * q_fn(x1) * q_prime(x2)], axis=-1)


ELLIPSE_MX = np.array([[0.4, 0.0], [0.0, 0.2]])
ELLIPSE_MY = np.array([[0.3, 0.1], [0.2, 0.4]])


def ellipse_map_matrix(Mx: np.ndarray, My: np.ndarray) -> np.ndarray:
    """Jacobian of the optimal map between uniform ellipses Mx*B and My*B.

    The rotation angle solves symmetry of My R Mx^{-1}; for a symmetric My
    this reduces to tan(theta) = tr(Mx^{-1} My^{-1} J) / tr(Mx^{-1} My^{-1})
    with J the quarter-turn matrix.  (The general form uses My^{-T}, which
    also covers non-symmetric ellipse matrices.)
    """
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    Mxi = np.linalg.inv(Mx)
    T = Mxi @ np.linalg.inv(My).T
    denom = np.trace(T)
    if abs(denom) < 1e-14:
        raise ValueError("degenerate ellipse pair: zero trace denominator")
    theta = math.atan(np.trace(T @ J) / denom)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    return My @ R @ Mxi


def exact_ellipse_map(pts: np.ndarray, Mx=ELLIPSE_MX, My=ELLIPSE_MY) -> np.ndarray:
    A = ellipse_map_matrix(Mx, My)
    return np.asarray(pts, dtype=float) @ A.T


def exact_half_circles_map(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    out = pts.copy()
    out[..., 0] -= 0.1 * np.sign(pts[..., 0])
    return out


POLYGON_VERTICES_PAPER = [(-0.5, -0.3), (-0.5, 0.4), (0.0, 0.5), (0.5, 0.3), (0.3, -0.5)]


def polygon_region() -> ConvexPolygon:
    # Listed clockwise in the source; reversed for the CCW convention.
    return ConvexPolygon(np.array(POLYGON_VERTICES_PAPER[::-1], dtype=float))


def sine_region(samples: int = 2048) -> PolylineRegion:
    """Non-convex region 0 < y1 < 1, 0 < y2 < 1 - 0.1 sin(2 pi y1)."""
    t = np.linspace(1.0, 0.0, samples)
    top = np.stack([t, 1.0 - 0.1 * np.sin(2 * math.pi * t)], axis=1)
    pts = np.vstack([[[0.0, 0.0]], [[1.0, 0.0]], top, [[0.0, 0.0]]])
    return PolylineRegion(pts)


def synthetic_image_pair(m: int = 64):
    """Deterministic two-blob grayscale pair standing in for scan data."""
    xs = np.linspace(0.0, 1.0, m)
    X, Y = np.meshgrid(xs, xs, indexing="ij")

    def blob(cx, cy, s, amp):
        return amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))

    f_img = 20.0 + blob(0.32, 0.38, 0.13, 200.0) + blob(0.42, 0.70, 0.09, 140.0)
    g_img = 20.0 + blob(0.66, 0.45, 0.11, 190.0) + blob(0.58, 0.75, 0.10, 150.0)
    return np.rint(f_img).astype(float), np.rint(g_img).astype(float)


# -- error metric -------------------------------------------------------------


def map_error(state, ctx: SolveContext, exact_map) -> float:
    """Max-norm gradient-map error over nodes where f > 0."""
    g1, g2 = ctx.gradient_arrays(state)
    pts = np.stack([ctx.grid.X1, ctx.grid.X2], axis=-1)
    ex = exact_map(pts)
    mask = ctx.f_values.reshape(ctx.grid.n, ctx.grid.n) > 0
    if not mask.any():
        return math.nan
    e1 = np.max(np.abs(g1 - ex[..., 0])[mask])
    e2 = np.max(np.abs(g2 - ex[..., 1])[mask])
    return float(max(e1, e2))


def rect_affine_map(src: tuple, dst: Rectangle):
    """Side-matching affine map between rectangles (exact Neumann data for
    rectangle targets)."""
    x1min, x1max, x2min, x2max = src
    slo, shi = np.array([x1min, x2min]), np.array([x1max, x2max])
    scale = (dst.hi - dst.lo) / (shi - slo)

    def bmap(x):
        return dst.lo + (np.asarray(x) - slo) * scale

    return bmap


# -- catalog ------------------------------------------------------------------


@dataclass
class ExampleSpec:
    name: str
    kind: str  # "neumann" | "outer"
    build: object  # (scheme, delta, h) -> (TransportProblem, exact_map or None)
    inverse_of: str | None = None  # inversion comparison partner


def _build_gaussian(**kw):
    target = Rectangle((0.5, -1.0), (1.5, 1.0))
    f = analytic_density(lambda x, y: np.exp(-x ** 2 / 0.32 - y ** 2 / 0.32) / 0.16)
    g = analytic_density(
        lambda x, y: np.exp(-(x - 1.0) ** 2 / 0.32 - y ** 2 / 0.08) / 0.08,
        support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target,
                            boundary_map=lambda p: exact_gaussian_map(p[None, :])[0], **kw)
    return prob, exact_gaussian_map


def _build_q_forward(**kw):
    target = Rectangle((-0.5, -0.5), (0.5, 0.5))
    f = analytic_density(q_density_fn)
    g = constant_density(1.0, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target,
                            boundary_map=rect_affine_map(SQUARE, target), **kw)
    return prob, exact_q_map


def _build_q_inverse(**kw):
    target = Rectangle((-0.5, -0.5), (0.5, 0.5))
    f = constant_density(1.0)
    g = analytic_density(q_density_fn, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target,
                            boundary_map=rect_affine_map(SQUARE, target), **kw)
    return prob, None  # compared through inversion against q_forward


def blowup_density(support: Rectangle) -> Density:
    def fn(y1, y2):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        num = np.exp(-2.0 * np.sqrt((y1 - 0.5) ** 2 + (y2 - 0.5) ** 2))
        den = np.sqrt((y1 - 0.7) ** 2 + (y2 - 0.7) ** 2)
        with np.errstate(divide="ignore"):
            return num / den

    return analytic_density(fn, support=support)


def _build_blowup(h: float, **kw):
    target = Rectangle((0.0, 0.0), (1.0, 1.0))
    f = constant_density(1.0)
    g = regularize_singular(blowup_density(target), h)
    prob = TransportProblem(rect=UNIT_SQUARE, f=f, g=g, target=target,
                            boundary_map=rect_affine_map(UNIT_SQUARE, target), **kw)
    return prob, None


def _build_image_pair(n: int, **kw):
    target = Rectangle((0.0, 0.0), (1.0, 1.0))
    f_img, g_img = synthetic_image_pair()
    f = load_image_density(f_img, UNIT_SQUARE, n)
    g = load_image_density(g_img, UNIT_SQUARE, n)
    g.support = target
    g.grad_fn = None
    prob = TransportProblem(rect=UNIT_SQUARE, f=f, g=g, target=target,
                            boundary_map=rect_affine_map(UNIT_SQUARE, target), **kw)
    return prob, None


def _build_ellipse(**kw):
    source = Ellipse(ELLIPSE_MX)
    target = Ellipse(ELLIPSE_MY)

    def f_fn(x, y):
        pts = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)], axis=-1)
        flat = pts.reshape(-1, 2)
        return source.contains_many(flat).astype(float).reshape(pts.shape[:-1])

    f = analytic_density(f_fn)
    g = constant_density(1.0, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target, **kw)
    return prob, exact_ellipse_map


def half_circles_f_fn(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    left = (x < -0.1) & ((x + 0.1) ** 2 + y ** 2 < 0.09)
    right = (x > 0.1) & ((x - 0.1) ** 2 + y ** 2 < 0.09)
    return (left | right).astype(float)


def _build_half_circles(**kw):
    target = Disc((0.0, 0.0), 0.3)
    f = analytic_density(half_circles_f_fn)
    g = constant_density(1.0, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target, **kw)
    return prob, exact_half_circles_map


def _build_polygon_forward(**kw):
    target = polygon_region()
    f = constant_density(1.0)
    g = constant_density(1.0, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target, **kw)
    return prob, None


def _build_polygon_inverse(**kw):
    poly = polygon_region()
    target = Rectangle((-0.5, -0.5), (0.5, 0.5))

    def f_fn(x, y):
        pts = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)], axis=-1)
        flat = pts.reshape(-1, 2)
        return poly.contains_many(flat).astype(float).reshape(pts.shape[:-1])

    f = analytic_density(f_fn)
    g = constant_density(1.0, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target,
                            boundary_map=rect_affine_map(SQUARE, target), **kw)
    return prob, None


def _build_nonconvex_sine(**kw):
    target = sine_region()

    def g_fn(y1, y2):
        r = np.sqrt((np.asarray(y1, dtype=float) - 0.5) ** 2
                    + (np.asarray(y2, dtype=float) - 0.5) ** 2)
        return 2.0 + np.cos(8 * math.pi * r)

    f = constant_density(1.0)
    g = analytic_density(g_fn, support=target)
    prob = TransportProblem(rect=SQUARE, f=f, g=g, target=target, **kw)
    return prob, None


# -- run configuration and driver ---------------------------------------------


@dataclass
class RunConfig:
    example: str = ""
    n: int = 64
    levels: list | None = None  # ascending coarse-to-fine schedule
    scheme: str = "hybrid"
    newton_tol: float = 1e-8
    outer_tol: float = 0.1
    delta: float = 1e-8
    out_dir: str | None = None
    seed: int = 0

    def level_schedule(self) -> list:
        if self.levels:
            return list(self.levels)
        return [32, self.n] if self.n > 32 else [self.n]


@dataclass
class ExampleResult:
    name: str
    n: int
    h: float
    scheme: str
    status: str
    outer_solves: int
    newton_iterations: int
    wall_seconds: float
    map_error: float
    fwd_inv_max_diff: float
    c: float
    density_ratio: float
    folded_cells: int
    containment_max: float
    boundary_change: float
    state: object = None
    ctx: object = None

    def row(self) -> dict:
        return {
            "example": self.name, "n": self.n, "h": self.h, "scheme": self.scheme,
            "status": self.status, "outer_solves": self.outer_solves,
            "newton_iterations": self.newton_iterations,
            "wall_seconds": self.wall_seconds, "map_error": self.map_error,
            "fwd_inv_max_diff": self.fwd_inv_max_diff, "c": self.c,
            "density_ratio": self.density_ratio, "folded_cells": self.folded_cells,
            "containment_max": self.containment_max,
            "boundary_change": self.boundary_change,
        }


def _problem_kwargs(config: RunConfig) -> dict:
    return dict(scheme=config.scheme, delta=config.delta, newton_tol=config.newton_tol,
                outer_tol=config.outer_tol)


def build_problem(name: str, config: RunConfig, n: int):
    kw = _problem_kwargs(config)
    if name == "gaussian":
        return _build_gaussian(**kw)
    if name == "q_forward":
        return _build_q_forward(**kw)
    if name == "q_inverse":
        return _build_q_inverse(**kw)
    if name == "blowup":
        h = (UNIT_SQUARE[1] - UNIT_SQUARE[0]) / (n - 1)
        return _build_blowup(h, **kw)
    if name == "image_pair":
        return _build_image_pair(n, **kw)
    if name == "ellipse":
        return _build_ellipse(**kw)
    if name == "half_circles":
        return _build_half_circles(**kw)
    if name == "polygon_forward":
        return _build_polygon_forward(**kw)
    if name == "polygon_inverse":
        return _build_polygon_inverse(**kw)
    if name == "nonconvex_sine":
        return _build_nonconvex_sine(**kw)
    raise KeyError(f"unknown example {name!r}")


NEUMANN_EXAMPLES = {"gaussian", "q_forward", "q_inverse", "blowup", "image_pair",
                    "polygon_inverse"}
NORMALIZED_EXAMPLES = {"blowup", "image_pair", "ellipse", "half_circles",
                       "polygon_forward", "polygon_inverse", "nonconvex_sine"}


def _solve_neumann_example(problem: TransportProblem, n: int):
    ctx = SolveContext(problem, n)
    phi = init_boundary_data(problem, ctx.grid)
    state = make_initial_state(ctx, phi)
    state, rep = solve_ma_neumann(ctx.system, phi, state,
                                  tol=problem.newton_tol, max_iter=problem.max_newton)
    outer = OuterReport(outer_solves=1, boundary_changes=[], newton_iterations=[rep.iterations],
                        solve_seconds=[rep.wall_seconds], final_c=state.c,
                        status=rep.status, params=ctx.params)
    return state, outer, ctx


def run_example(name: str, config: RunConfig) -> ExampleResult:
    if name not in EXAMPLE_NAMES:
        raise KeyError(f"unknown example {name!r}")
    t0 = time.perf_counter()
    n = config.n
    problem, exact = build_problem(name, config, n)

    if name in NORMALIZED_EXAMPLES:
        from .grid import build_grid

        problem.f, problem.g, _ = normalize_mass(problem.f, problem.g,
                                                 build_grid(n, problem.rect))

    if name in NEUMANN_EXAMPLES:
        state, outer, ctx = _solve_neumann_example(problem, n)
    else:
        levels = [lv for lv in config.level_schedule() if lv <= n]
        if not levels or levels[-1] != n:
            levels = (levels or []) + [n]
        state, outer, ctx = coarse_to_fine(problem, levels)

    err = map_error(state, ctx, exact) if exact is not None else math.nan
    folded = folded_cell_count(state, ctx)
    contain = containment_excess(state, ctx)
    ratio = math.nan
    if name == "blowup":
        mapped = ctx.mapped_points(state).reshape(-1, 2)
        inside = ctx.f_values > 0
        gv = problem.g.evaluate(mapped[inside])
        ratio = float(np.max(gv / ctx.f_values[inside]))

    fwd_inv = math.nan
    if name in ("q_inverse", "polygon_inverse"):
        partner = "q_forward" if name == "q_inverse" else "polygon_forward"
        fcfg = RunConfig(example=partner, n=n, levels=config.levels, scheme=config.scheme,
                         newton_tol=config.newton_tol, outer_tol=config.outer_tol,
                         delta=config.delta)
        fwd = run_example(partner, fcfg)
        queries = np.stack([fwd.ctx.grid.X1, fwd.ctx.grid.X2], axis=-1).reshape(-1, 2)
        inv_pts, found = invert_map(state, ctx, queries)
        fg1, fg2 = fwd.ctx.gradient_arrays(fwd.state)
        fwd_map = np.stack([fg1.ravel(), fg2.ravel()], axis=-1)
        mask = found & (fwd.ctx.f_values > 0)
        fwd_inv = float(np.max(np.abs(fwd_map[mask] - inv_pts[mask])))
        if name == "q_inverse":
            ex = exact_q_map(queries[mask])
            err = float(np.max(np.abs(inv_pts[mask] - ex)))

    wall = time.perf_counter() - t0
    return ExampleResult(
        name=name, n=n, h=ctx.grid.h, scheme=config.scheme, status=outer.status,
        outer_solves=outer.outer_solves, newton_iterations=outer.total_newton,
        wall_seconds=wall, map_error=err, fwd_inv_max_diff=fwd_inv, c=state.c,
        density_ratio=ratio, folded_cells=folded, containment_max=contain,
        boundary_change=(outer.boundary_changes[-1] if outer.boundary_changes else math.nan),
        state=state, ctx=ctx,
    )
