"""Damped Newton solver for the discrete Monge-Ampere Neumann problem.

Unknowns are the padded grid values (real + ghost) plus the solvability
constant c.  The square system pairs every unknown with a row:

    real node          -> hybrid MA residual (the pinned corner's MA row is
                          parked in the extra slot that pairs with c)
    pinned corner      -> u = 0 normalization row
    ghost across a side-> centered normal-derivative row through the ghost,
                          (u(x + h n) - u(x - h n))/(2h) = phi(x)
    diagonal ghost     -> centered outward-diagonal derivative at the corner
    extra slot (c)     -> MA residual at the pinned corner

All boundary rows are linear and independent of the iterate, so a start that
satisfies them exactly keeps satisfying them: Newton correctors see
homogeneous Neumann data automatically.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import MAOperator, RhsField
from .grid import CORNER_DIAGS, SIDE_NORMALS, SIDES, Grid2D, GridFunction

C_MIN = 1e-6
MAX_HALVINGS = 6


class SolverFailure(RuntimeError):
    def __init__(self, message: str, iterations: int = 0):
        super().__init__(message)
        self.iterations = iterations


@dataclass
class NeumannData:
    """Normal-derivative data: one value per (side, node-on-side) pair plus
    four outward-diagonal corner values.

    Corners carry one value per incident side; side arrays are ordered along
    the side coordinate.  Corner order: (min,min), (max,min), (min,max), (max,max).
    """

    side_phi: dict
    corner_phi: np.ndarray

    def copy(self) -> "NeumannData":
        return NeumannData({s: v.copy() for s, v in self.side_phi.items()},
                           self.corner_phi.copy())

    def max_diff(self, other: "NeumannData") -> float:
        d = max(np.max(np.abs(self.side_phi[s] - other.side_phi[s])) for s in SIDES)
        return float(max(d, np.max(np.abs(self.corner_phi - other.corner_phi))))

    def stack(self) -> np.ndarray:
        return np.concatenate([self.side_phi[s] for s in SIDES] + [self.corner_phi])

    @classmethod
    def from_map(cls, grid: Grid2D, bmap) -> "NeumannData":
        """Data from a boundary map y(x): phi = y(x) . n on sides, y(x) . d at corners."""
        side_phi = {}
        for side in SIDES:
            ii, jj = grid.side_nodes(side)
            xy = np.stack([grid.x1_pad[ii], grid.x2_pad[jj]], axis=-1)
            side_phi[side] = np.asarray([bmap(p) @ SIDE_NORMALS[side] for p in xy])
        corner_phi = np.array([
            bmap(grid.node_xy(i, j)) @ CORNER_DIAGS[k]
            for k, (i, j) in enumerate(grid.corners_pad)
        ])
        return cls(side_phi, corner_phi)

    def check(self, grid: Grid2D):
        for s in SIDES:
            if len(self.side_phi[s]) != grid.n:
                raise ValueError(f"side {s}: expected {grid.n} values")
            if not np.all(np.isfinite(self.side_phi[s])):
                raise ValueError(f"side {s}: non-finite Neumann data")
        if len(self.corner_phi) != 4 or not np.all(np.isfinite(self.corner_phi)):
            raise ValueError("bad corner data")


@dataclass
class NewtonState:
    u: GridFunction
    c: float
    iterations: int = 0
    residual_history: list = field(default_factory=list)

    def copy(self) -> "NewtonState":
        return NewtonState(self.u.copy(), self.c, self.iterations, list(self.residual_history))

    def unknown_vector(self) -> np.ndarray:
        return np.concatenate([self.u.flat(), [self.c]])


@dataclass
class SolveReport:
    iterations: int
    residual_norm: float
    status: str  # "ok" | "max_iter" | "stalled"
    wall_seconds: float
    residual_history: list


class NeumannSystem:
    """Assembled residual/Jacobian for one grid + operator + right-hand side."""

    def __init__(self, grid: Grid2D, op: MAOperator, rhs: RhsField):
        self.grid = grid
        self.op = op
        self.rhs = rhs
        n = grid.n
        npad = grid.n_pad

        # Row slot of each MA row (pin corner's MA row parks in the c slot).
        pin = grid.pad_flat(*grid.pin_corner)
        slots = grid.real_pad_flat.copy()
        slots[slots == pin] = npad
        self.ma_slots = slots
        self.pin_slot = pin

        rows, cols, vals = [], [], []
        bnd_slots = []
        h = grid.h
        r = 0
        for side in SIDES:
            ii, jj = grid.side_nodes(side)
            gi, gj = grid.side_ghosts(side)
            mi, mj = 2 * ii - gi, 2 * jj - gj  # mirror node: node - (ghost - node)
            for k in range(n):
                rows += [r, r]
                cols += [grid.pad_flat(gi[k], gj[k]), grid.pad_flat(mi[k], mj[k])]
                vals += [1.0 / (2 * h), -1.0 / (2 * h)]
                bnd_slots.append(grid.pad_flat(gi[k], gj[k]))
                r += 1
        diag_scale = 1.0 / (2 * math.sqrt(2.0) * h)
        for k, (ci, cj) in enumerate(grid.corners_pad):
            gi, gj = grid.corner_ghosts_pad[k]
            di, dj = 2 * ci - gi, 2 * cj - gj
            rows += [r, r]
            cols += [grid.pad_flat(gi, gj), grid.pad_flat(di, dj)]
            vals += [diag_scale, -diag_scale]
            bnd_slots.append(grid.pad_flat(gi, gj))
            r += 1
        self.B = sp.csr_matrix((vals, (rows, cols)), shape=(r, grid.n_unknowns))
        self.bnd_slots = np.array(bnd_slots)
        self._bnd_embed = sp.csr_matrix(
            (np.ones(r), (self.bnd_slots, np.arange(r))), shape=(grid.n_unknowns, r))
        self._ma_embed = sp.csr_matrix(
            (np.ones(n * n), (self.ma_slots, np.arange(n * n))),
            shape=(grid.n_unknowns, n * n))
        pin_row = sp.csr_matrix(([1.0], ([self.pin_slot], [pin])),
                                shape=(grid.n_unknowns, grid.n_unknowns))
        self._pin_matrix = pin_row
        self._laplacian = None

    def phi_stack(self, phi: NeumannData) -> np.ndarray:
        phi.check(self.grid)
        return phi.stack()

    def residual(self, state: NewtonState, phi: NeumannData):
        x = state.unknown_vector()
        ma_vals, info = self.op.residual(x[:-1], state.c, self.rhs)
        r = np.zeros(self.grid.n_unknowns)
        r[self.ma_slots] = ma_vals
        r[self.bnd_slots] = self.B @ x - self.phi_stack(phi)
        r[self.pin_slot] = x[self.grid.pad_flat(*self.grid.pin_corner)]
        return r, info

    def jacobian(self, state: NewtonState, phi: NeumannData, info: dict) -> sp.csr_matrix:
        x = state.unknown_vector()
        J_ma = self.op.jacobian(x[:-1], state.c, self.rhs, info)
        return (self._ma_embed @ J_ma) + (self._bnd_embed @ self.B) + self._pin_matrix

    def laplacian_system(self) -> sp.csr_matrix:
        """Linear system for the Poisson initializer: 5-point Laplacian rows in
        the MA slots (pin node's row replaced by c-pin in the extra slot)."""
        if self._laplacian is not None:
            return self._laplacian
        g = self.grid
        h2 = g.h ** 2
        rows, cols, vals = [], [], []
        for i in range(1, g.n + 1):
            for j in range(1, g.n + 1):
                r = self.ma_slots[g.real_index(i, j)]
                if r == g.n_pad:  # pin node: its slot carries "c = c0" instead
                    continue
                for (ii, jj, c) in [(i, j, -4.0), (i + 1, j, 1.0), (i - 1, j, 1.0),
                                    (i, j + 1, 1.0), (i, j - 1, 1.0)]:
                    rows.append(r)
                    cols.append(g.pad_flat(ii, jj))
                    vals.append(c / h2)
        rows.append(g.n_pad)
        cols.append(g.n_unknowns - 1)
        vals.append(1.0)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(g.n_unknowns, g.n_unknowns))
        self._laplacian = A + (self._bnd_embed @ self.B) + self._pin_matrix
        return self._laplacian


def linear_solve(A: sp.csr_matrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve with a residual-based contract (one refinement pass)."""
    try:
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
        scale = max(float(np.max(np.abs(b))), 1e-300)
        res = b - A @ x
        if np.max(np.abs(res)) > rtol * scale:
            x = x + lu.solve(res)
            res = b - A @ x
        if not np.all(np.isfinite(x)) or np.max(np.abs(res)) > rtol * scale:
            raise SolverFailure("linear solve did not meet the residual contract")
    except (RuntimeError, ValueError) as exc:
        raise SolverFailure(f"sparse factorization failed: {exc}") from exc
    return x


def solve_ma_neumann(system: NeumannSystem, phi: NeumannData, init: NewtonState,
                     tol: float = 1e-8, max_iter: int = 30):
    """Damped Newton on (u, c); accepts only residual-decreasing steps."""
    t0 = time.perf_counter()
    state = init.copy()
    state.residual_history = []
    status = "max_iter"
    r, info = system.residual(state, phi)
    rn = float(np.max(np.abs(r)))
    state.residual_history.append(rn)
    it = 0
    while it < max_iter:
        if rn < tol:
            status = "ok"
            break
        J = system.jacobian(state, phi, info)
        try:
            step = linear_solve(J, r)
        except SolverFailure as exc:
            exc.iterations = it
            raise
        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            trial = state.copy()
            trial.u.values = state.u.values - alpha * step[:-1].reshape(state.u.values.shape)
            trial.c = max(state.c - alpha * step[-1], C_MIN)
            tr, tinfo = system.residual(trial, phi)
            trn = float(np.max(np.abs(tr)))
            if trn < rn:
                state, r, info, rn = trial, tr, tinfo, trn
                accepted = True
                break
            alpha *= 0.5
        it += 1
        if not accepted:
            status = "stalled"
            break
        state.residual_history.append(rn)
        if rn < tol:
            status = "ok"
            break
    state.iterations = it
    report = SolveReport(iterations=it, residual_norm=rn, status=status,
                         wall_seconds=time.perf_counter() - t0,
                         residual_history=list(state.residual_history))
    return state, report


def initial_guess_poisson(system: NeumannSystem, phi: NeumannData,
                          x0: np.ndarray, c0: float = 1.0) -> NewtonState:
    """Initial iterate from the Poisson surrogate Delta u = sqrt(2 c0 f / g(x - x0)),
    solved with the same Neumann/corner/pin rows (d = 2, d! = 2)."""
    g = system.grid
    pts = np.stack([g.X1, g.X2], axis=-1).reshape(-1, 2) - np.asarray(x0, dtype=float)
    ratio = system.rhs.f_values / system.rhs.g.evaluate(pts)
    if np.any(ratio < 0):
        raise ValueError("negative f/g in Poisson right-hand side")
    rhs_vals = np.sqrt(2.0 * c0 * ratio)
    b = np.zeros(g.n_unknowns)
    b[system.ma_slots] = rhs_vals
    b[g.n_pad] = c0  # the pin node's slot swap parks "c = c0" in the extra row
    b[system.bnd_slots] = system.phi_stack(phi)
    b[system.pin_slot] = 0.0
    A = system.laplacian_system()
    x = linear_solve(A, b)
    u = GridFunction(g, x[:-1].reshape(g.np_side, g.np_side))
    # The pin row is part of the solve; the shift below is a numerical safety.
    u.values -= u.values[g.pin_corner]
    u.check_finite()
    return NewtonState(u=u, c=float(x[-1]))


def warm_start_with_new_phi(state: NewtonState, phi: NeumannData) -> NewtonState:
    """Re-derive ghost values so the new boundary rows hold exactly; interior
    values are untouched."""
    g = state.u.grid
    out = state.copy()
    u = out.u.values
    h = g.h
    for side in SIDES:
        ii, jj = g.side_nodes(side)
        gi, gj = g.side_ghosts(side)
        mi, mj = 2 * ii - gi, 2 * jj - gj
        u[gi, gj] = u[mi, mj] + 2 * h * phi.side_phi[side]
    for k, (ci, cj) in enumerate(g.corners_pad):
        gi, gj = g.corner_ghosts_pad[k]
        di, dj = 2 * ci - gi, 2 * cj - gj
        u[gi, gj] = u[di, dj] + 2 * math.sqrt(2.0) * h * phi.corner_phi[k]
    return out
