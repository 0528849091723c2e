"""Outer transport iteration: solve with Neumann data, project boundary
gradients onto the target boundary, repeat until the data stops moving.

Each pass solves

    det(D^2 u) = c f / g(grad u),   du/dn = phi_k on the square boundary

and extracts the next data phi_{k+1}(x) = Proj_{dY}(grad u(x)) . n(x) (corner
rows use the outward diagonal direction).  At kinks of u the centered
difference picks the midpoint of the discrete sub-differential, which is an
admissible sub-gradient choice.  The loop stops when the max-norm change of
the data drops below outer_tol * h.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .density import Density, mass_on_grid
from .discretization import (
    MAOperator,
    MAOperatorParams,
    RhsField,
    delta_lower_bound,
    estimate_k_f,
    hybrid_weight,
)
from .geometry import Rectangle, TargetBoundary
from .grid import CORNER_DIAGS, SIDE_NORMALS, SIDES, Grid2D, build_grid, generate_direction_bases
from .newton import (
    NeumannData,
    NeumannSystem,
    NewtonState,
    SolverFailure,
    initial_guess_poisson,
    solve_ma_neumann,
    warm_start_with_new_phi,
)


@dataclass
class TransportProblem:
    rect: tuple  # computational square (x1min, x1max, x2min, x2max); f = 0 outside X
    f: Density
    g: Density
    target: TargetBoundary
    boundary_map: object = None  # x -> y closure when the exact data is known (rectangle cases)
    scheme: str = "hybrid"
    delta: float = 1e-8
    newton_tol: float = 1e-8
    outer_tol: float = 0.1
    max_outer: int = 50
    max_newton: int = 30
    init_scale: float | None = None  # M for the scaled-identity start; None -> auto
    x0: np.ndarray | None = None  # Poisson-init evaluation point, default target interior
    c0: float | None = None  # None -> compatibility-scaled


@dataclass
class OuterReport:
    outer_solves: int
    boundary_changes: list
    newton_iterations: list
    solve_seconds: list
    final_c: float
    status: str
    params: MAOperatorParams | None = None

    @property
    def total_newton(self) -> int:
        return int(sum(self.newton_iterations))


class SolveContext:
    """Grid-level assembly of one transport problem."""

    def __init__(self, problem: TransportProblem, n: int):
        self.problem = problem
        self.grid = build_grid(n, problem.rect)
        pts = np.stack([self.grid.X1, self.grid.X2], axis=-1)
        f_vals = problem.f.evaluate(pts).ravel()
        f_vals = np.maximum(f_vals, 0.0)
        self.f_values = f_vals
        weights = None
        if problem.scheme == "hybrid":
            weights = hybrid_weight(self.grid, f_vals)
        self.op = MAOperator(self.grid, generate_direction_bases(2), scheme=problem.scheme,
                             delta=problem.delta, weights=weights)
        self.rhs = RhsField(f_vals, problem.g)
        self.system = NeumannSystem(self.grid, self.op, self.rhs)
        k_f = estimate_k_f(float(f_vals.max()), problem.g, problem.target)
        self.params = MAOperatorParams(
            delta=problem.delta, k_f=k_f, bases=self.op.bases, scheme=problem.scheme,
            delta_condition_ok=problem.delta > delta_lower_bound(k_f, self.grid.h, self.op.bases),
        )

    def gradient_arrays(self, state: NewtonState):
        """Centered grad u on all real nodes (ghosts make the boundary valid)."""
        u = state.u.values
        h = self.grid.h
        g1 = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * h)
        g2 = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * h)
        return g1, g2

    def mapped_points(self, state: NewtonState) -> np.ndarray:
        g1, g2 = self.gradient_arrays(state)
        return np.stack([g1, g2], axis=-1)


def check_mass_balance(problem: TransportProblem, ctx: SolveContext, tol: float = 1e-2) -> float:
    from .density import mass_on_support

    mf = mass_on_grid(problem.f, ctx.grid)
    mg = (mass_on_support(problem.g, ctx.grid.h) if problem.g.support is not None
          else mass_on_grid(problem.g, ctx.grid))
    rel = abs(mf - mg) / mf
    if rel > tol:
        raise ValueError(f"mass imbalance {rel:.3g} exceeds {tol}; normalize densities first")
    return rel


def auto_init_scale(problem: TransportProblem, margin: float = 1.2, k: int = 256) -> float:
    """M such that the scaled identity boundary data encloses the target."""
    samples = problem.target.boundary_samples(k)
    max_y = float(np.max(np.hypot(samples[:, 0], samples[:, 1])))
    x1min, x1max, x2min, x2max = problem.rect
    min_face = min(abs(x1min), abs(x1max), abs(x2min), abs(x2max))
    if min_face <= 0:
        raise ValueError("scaled-identity start needs the origin inside the square")
    return margin * max_y / min_face


def init_boundary_data(problem: TransportProblem, grid: Grid2D) -> NeumannData:
    """phi0 from the known boundary map when available, otherwise from the
    scaled identity x -> M x with M validated to enclose the target."""
    if problem.boundary_map is not None:
        return NeumannData.from_map(grid, problem.boundary_map)
    M = problem.init_scale if problem.init_scale is not None else auto_init_scale(problem)
    scaled = Rectangle((M * problem.rect[0], M * problem.rect[2]),
                       (M * problem.rect[1], M * problem.rect[3]))
    for p in problem.target.boundary_samples(256):
        if not scaled.contains(p):
            raise ValueError(f"scaled identity M={M} does not enclose the target near {p}")
    return NeumannData.from_map(grid, lambda x: M * x)


def project_boundary_gradient(state: NewtonState, ctx: SolveContext) -> NeumannData:
    """Project the boundary gradient map onto the target boundary and read off
    normal (and corner diagonal) components."""
    grid = ctx.grid
    target = ctx.problem.target
    g1, g2 = ctx.gradient_arrays(state)
    side_phi = {}
    for side in SIDES:
        ii, jj = grid.side_nodes(side)
        P = np.stack([g1[ii - 1, jj - 1], g2[ii - 1, jj - 1]], axis=-1)
        proj = target.project_many(P)
        side_phi[side] = proj @ SIDE_NORMALS[side]
    corner_phi = np.empty(4)
    for k, (ci, cj) in enumerate(grid.corners_pad):
        p = np.array([g1[ci - 1, cj - 1], g2[ci - 1, cj - 1]])
        corner_phi[k] = target.project_to_boundary(p) @ CORNER_DIAGS[k]
    return NeumannData(side_phi, corner_phi)


def compatible_c0(ctx: SolveContext, phi: NeumannData, x0: np.ndarray) -> float:
    """c0 making the Poisson initializer compatible with the Neumann data:
    scales sqrt(2 c0 f/g) so its integral matches the boundary flux."""
    grid = ctx.grid
    h = grid.h
    flux = 0.0
    for side in SIDES:
        v = phi.side_phi[side]
        flux += h * (v.sum() - 0.5 * (v[0] + v[-1]))
    pts = np.stack([grid.X1, grid.X2], axis=-1).reshape(-1, 2) - x0
    base = np.sqrt(2.0 * np.maximum(ctx.rhs.f_values, 0.0) / ctx.rhs.g.evaluate(pts))
    area_int = float(base.sum() * h * h)
    if area_int <= 0 or flux <= 0:
        return 1.0
    return float((flux / area_int) ** 2)


def make_initial_state(ctx: SolveContext, phi: NeumannData) -> NewtonState:
    problem = ctx.problem
    x0 = problem.x0 if problem.x0 is not None else problem.target.interior_point()
    c0 = problem.c0 if problem.c0 is not None else compatible_c0(ctx, phi, x0)
    return initial_guess_poisson(ctx.system, phi, x0, c0)


def transport_solve(problem: TransportProblem, n_or_ctx, phi0: NeumannData | None = None):
    """Outer loop of the boundary-projection iteration on a single grid.

    Returns (state, report, phi) with phi the converged Neumann data.
    """
    ctx = n_or_ctx if isinstance(n_or_ctx, SolveContext) else SolveContext(problem, n_or_ctx)
    grid = ctx.grid
    phi = phi0.copy() if phi0 is not None else init_boundary_data(problem, grid)
    state = make_initial_state(ctx, phi)
    changes, iters, secs = [], [], []
    status = "max_outer"
    for k in range(problem.max_outer):
        t0 = time.perf_counter()
        try:
            state, rep = solve_ma_neumann(ctx.system, phi, state,
                                          tol=problem.newton_tol, max_iter=problem.max_newton)
        except SolverFailure as exc:
            raise SolverFailure(f"outer iteration {k + 1}: {exc}", exc.iterations) from exc
        secs.append(time.perf_counter() - t0)
        iters.append(rep.iterations)
        phi_new = project_boundary_gradient(state, ctx)
        change = phi_new.max_diff(phi)
        changes.append(change)
        if change < problem.outer_tol * grid.h:
            status = "ok" if rep.status == "ok" else rep.status
            break
        phi = phi_new
        state = warm_start_with_new_phi(state, phi)
    report = OuterReport(outer_solves=len(iters), boundary_changes=changes,
                         newton_iterations=iters, solve_seconds=secs,
                         final_c=state.c, status=status, params=ctx.params)
    return state, report, phi


def interpolate_neumann(phi: NeumannData, grid_c: Grid2D, grid_f: Grid2D) -> NeumannData:
    """Piecewise-linear interpolation of side data onto a finer grid; corner
    values carry over directly."""
    side_phi = {}
    for side in SIDES:
        if side in ("x1min", "x1max"):
            tc, tf = grid_c.x2_pad[1:-1], grid_f.x2_pad[1:-1]
        else:
            tc, tf = grid_c.x1_pad[1:-1], grid_f.x1_pad[1:-1]
        side_phi[side] = np.interp(tf, tc, phi.side_phi[side])
    return NeumannData(side_phi, phi.corner_phi.copy())


def coarse_to_fine(problem: TransportProblem, levels, contexts=None):
    """Run the outer iteration through ascending grid sizes, carrying the
    converged Neumann data up; the report covers the finest level only."""
    levels = list(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    if levels[0] < 8:
        raise ValueError("coarsest level must be at least 8")
    phi = None
    prev_grid = None
    state = report = ctx = None
    for li, n in enumerate(levels):
        ctx = (contexts[li] if contexts is not None else SolveContext(problem, n))
        phi0 = None
        if phi is not None:
            phi0 = interpolate_neumann(phi, prev_grid, ctx.grid)
        state, report, phi = transport_solve(problem, ctx, phi0)
        prev_grid = ctx.grid
    return state, report, ctx


# -- map inversion ------------------------------------------------------------


def _inverse_bilinear(quad: np.ndarray, y: np.ndarray):
    """Solve the bilinear map of the quad for local coordinates (s, t)."""
    q0, q1, q2, q3 = quad  # corners (0,0), (1,0), (1,1), (0,1)
    s, t = 0.5, 0.5
    for _ in range(25):
        P = ((1 - s) * (1 - t)) * q0 + (s * (1 - t)) * q1 + (s * t) * q2 + ((1 - s) * t) * q3
        r = P - y
        if np.abs(r).max() < 1e-13:
            break
        ds = (1 - t) * (q1 - q0) + t * (q2 - q3)
        dt = (1 - s) * (q3 - q0) + s * (q2 - q1)
        J = np.array([[ds[0], dt[0]], [ds[1], dt[1]]])
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        if abs(det) < 1e-300:
            return None
        delta = np.array([J[1, 1] * r[0] - J[0, 1] * r[1],
                          -J[1, 0] * r[0] + J[0, 0] * r[1]]) / det
        s = min(max(s - delta[0], -0.25), 1.25)
        t = min(max(t - delta[1], -0.25), 1.25)
    if -1e-6 <= s <= 1 + 1e-6 and -1e-6 <= t <= 1 + 1e-6:
        return s, t
    return None


def _point_in_quad(quad: np.ndarray, y: np.ndarray, tol: float = 1e-12) -> bool:
    def in_tri(a, b, c):
        d1 = (b[0] - a[0]) * (y[1] - a[1]) - (b[1] - a[1]) * (y[0] - a[0])
        d2 = (c[0] - b[0]) * (y[1] - b[1]) - (c[1] - b[1]) * (y[0] - b[0])
        d3 = (a[0] - c[0]) * (y[1] - c[1]) - (a[1] - c[1]) * (y[0] - c[0])
        neg = (d1 < -tol) or (d2 < -tol) or (d3 < -tol)
        pos = (d1 > tol) or (d2 > tol) or (d3 > tol)
        return not (neg and pos)

    return in_tri(quad[0], quad[1], quad[2]) or in_tri(quad[0], quad[2], quad[3])


def invert_map(state: NewtonState, ctx: SolveContext, queries: np.ndarray):
    """Preimages of query points under the discrete gradient map.

    Locates the mapped-mesh quadrilateral containing each query (nearest-cell
    seed, spiral walk, exhaustive fallback) and inverts the bilinear map; the
    preimage is affine in the local cell coordinates.  Returns (points, found)
    where points rows are NaN when no cell contains the query.
    """
    from scipy.spatial import cKDTree

    grid = ctx.grid
    n = grid.n
    mapped = ctx.mapped_points(state)  # (n, n, 2)
    f = ctx.f_values.reshape(n, n) > 0
    valid = f[:-1, :-1] & f[1:, :-1] & f[1:, 1:] & f[:-1, 1:]
    cells = np.argwhere(valid)
    if len(cells) == 0:
        raise ValueError("no valid cells (f vanishes everywhere?)")
    centers = 0.25 * (mapped[:-1, :-1] + mapped[1:, :-1] + mapped[1:, 1:] + mapped[:-1, 1:])
    tree = cKDTree(centers[valid])

    def quad_of(a, b):
        return np.array([mapped[a, b], mapped[a + 1, b], mapped[a + 1, b + 1], mapped[a, b + 1]])

    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    out = np.full_like(queries, np.nan)
    found = np.zeros(len(queries), dtype=bool)
    _, seed_idx = tree.query(queries)
    lo = grid.lo
    h = grid.h
    for q in range(len(queries)):
        y = queries[q]
        sa, sb = cells[seed_idx[q]]
        hit = None
        for radius in range(0, 4):
            for da in range(-radius, radius + 1):
                for db in range(-radius, radius + 1):
                    if max(abs(da), abs(db)) != radius:
                        continue
                    a, b = sa + da, sb + db
                    if not (0 <= a < n - 1 and 0 <= b < n - 1) or not valid[a, b]:
                        continue
                    quad = quad_of(a, b)
                    if _point_in_quad(quad, y):
                        st = _inverse_bilinear(quad, y)
                        if st is not None:
                            hit = (a, b, st)
                            break
                if hit:
                    break
            if hit:
                break
        if hit is None:
            # Exhaustive fallback over bbox-filtered valid cells.
            qmins = np.minimum.reduce([mapped[:-1, :-1], mapped[1:, :-1],
                                       mapped[1:, 1:], mapped[:-1, 1:]])
            qmaxs = np.maximum.reduce([mapped[:-1, :-1], mapped[1:, :-1],
                                       mapped[1:, 1:], mapped[:-1, 1:]])
            cand = valid & np.all(qmins <= y, axis=-1) & np.all(qmaxs >= y, axis=-1)
            for a, b in np.argwhere(cand):
                quad = quad_of(a, b)
                if _point_in_quad(quad, y):
                    st = _inverse_bilinear(quad, y)
                    if st is not None:
                        hit = (a, b, st)
                        break
        if hit is not None:
            a, b, (s, t) = hit
            out[q] = lo + h * np.array([a + s, b + t])
            found[q] = True
    return out, found


def folded_cell_count(state: NewtonState, ctx: SolveContext) -> int:
    """Mapped quadrilaterals (over f > 0 cells) with nonpositive signed area."""
    n = ctx.grid.n
    mapped = ctx.mapped_points(state)
    f = ctx.f_values.reshape(n, n) > 0
    valid = f[:-1, :-1] & f[1:, :-1] & f[1:, 1:] & f[:-1, 1:]
    a = mapped[:-1, :-1]
    b = mapped[1:, :-1]
    c = mapped[1:, 1:]
    d = mapped[:-1, 1:]
    area = 0.5 * ((b[..., 0] - a[..., 0]) * (d[..., 1] - a[..., 1])
                  - (b[..., 1] - a[..., 1]) * (d[..., 0] - a[..., 0])
                  + (d[..., 0] - c[..., 0]) * (b[..., 1] - c[..., 1])
                  - (d[..., 1] - c[..., 1]) * (b[..., 0] - c[..., 0]))
    return int(np.count_nonzero(valid & (area <= 0)))


def containment_excess(state: NewtonState, ctx: SolveContext) -> float:
    """Largest distance of a mapped node (f > 0) outside the target region."""
    mapped = ctx.mapped_points(state).reshape(-1, 2)
    inside = ctx.f_values > 0
    P = mapped[inside]
    target = ctx.problem.target
    out = ~target.contains_many(P)
    if not out.any():
        return 0.0
    proj = target.project_many(P[out])
    return float(np.max(np.hypot(*(P[out] - proj).T)))
