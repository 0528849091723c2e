"""Pointwise Monge-Ampere residuals: standard, monotone wide-stencil, hybrid.

With F(x, p) = c f(x)/g(p), the standard residual at a node is

    MA_S[u] = (D_x1x1 u)(D_x2x2 u) - (D_x1x2 u)^2 - F(x, D_x1 u, D_x2 u)

and the monotone residual is the minimum over orthogonal grid bases
(nu_1, nu_2) of

    G = prod_j max{D_nujnuj u, delta} + sum_j min{D_nujnuj u, delta}
        - F(x, sum_j (nu_j . e_1)/|nu_j| D_nuj u, sum_j (nu_j . e_2)/|nu_j| D_nuj u)

where the gradient is rewritten in the rotated frame of the active basis,
delta > 0 bounds the curvature factors away from zero, and the min-terms
penalize non-convexity.  The hybrid residual blends the two with a weight
w(x) that is 1 near the set where the solution may be singular (domain
boundary, vanishing or blown-up or rough source density) and 0 two cells
away; w depends only on the grid and f, never on the iterate.

Minimizing bases are reported so Newton can assemble exact Jacobians of the
min (differentiate the active term only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .density import Density
from .grid import (
    DirectionBasis,
    Grid2D,
    first_difference_op,
    first_directional,
    generate_direction_bases,
    second_difference_op,
    second_directional,
    standard_ops,
)

HOLDER_OSC_FACTOR = 10.0  # local oscillation > factor * local min flags roughness


@dataclass
class RhsField:
    """Right-hand side F(x, p) = c f(x)/g(p) sampled on the real nodes."""

    f_values: np.ndarray  # (n*n,)
    g: Density

    def __post_init__(self):
        if np.any(self.f_values < 0):
            raise ValueError("source density must be nonnegative")

    def f_over_g(self, pts: np.ndarray) -> np.ndarray:
        gv = self.g.evaluate(pts)
        if np.any(gv <= 0):
            raise ValueError("target density evaluated nonpositive; check extension/floor")
        return self.f_values / gv

    def F(self, pts: np.ndarray, c: float) -> np.ndarray:
        return c * self.f_over_g(pts)

    def F_and_grad(self, pts: np.ndarray, c: float):
        """(F, dF/dp, f/g) at the probe gradients pts (n, 2); f/g is dF/dc."""
        gv = self.g.evaluate(pts)
        gg = self.g.gradient(pts)
        fog = self.f_values / gv
        Fp = -(c * fog / gv)[:, None] * gg
        return c * fog, Fp, fog


@dataclass
class MAOperatorParams:
    delta: float
    k_f: float
    bases: list
    scheme: str  # "standard" | "monotone" | "hybrid"
    delta_condition_ok: bool = False


def delta_lower_bound(k_f: float, h: float, bases) -> float:
    """Strict lower bound on delta for provable degenerate ellipticity (d=2)."""
    max_norm = max(max(b.norms) for b in bases)
    return k_f * max_norm * h / 2.0


def estimate_k_f(f_max: float, g: Density, region, c: float = 1.0,
                 samples: int = 96, inflate: float = 0.1) -> float:
    """Numerical Lipschitz estimate of p -> c f_max / g(p) over the target box.

    Uses the 99th percentile of the local slope |dF/dp| = c f |grad g| / g^2
    sampled on a fixed grid, which ignores sub-cell spikes of regularized
    singular densities (a sup over those would be vacuously large).
    """
    lo, hi = region.bbox()
    pad = inflate * (hi - lo)
    xs = np.linspace(lo[0] - pad[0], hi[0] + pad[0], samples)
    ys = np.linspace(lo[1] - pad[1], hi[1] + pad[1], samples)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
    gv = np.maximum(g.evaluate(pts), 1e-300)
    gg = g.gradient(pts)
    slope = c * f_max * np.hypot(gg[:, 0], gg[:, 1]) / gv ** 2
    return float(np.percentile(slope, 99.0))


# -- singular set and hybrid weight ------------------------------------------


def singular_set_mask(grid: Grid2D, f_vals: np.ndarray, eps: float) -> np.ndarray:
    """Real-node mask of X^s: domain boundary, f below eps or above 1/eps,
    or locally rough f (oscillation proxy for the Hoelder test)."""
    n = grid.n
    f = f_vals.reshape(n, n)
    mask = np.zeros((n, n), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    mask |= f < eps
    mask |= f > 1.0 / eps

    # Oscillation over the plus-shaped h-ball around each node.
    big = np.full((n + 2, n + 2), np.nan)
    big[1:-1, 1:-1] = f
    stack = np.stack([
        big[1:-1, 1:-1], big[:-2, 1:-1], big[2:, 1:-1], big[1:-1, :-2], big[1:-1, 2:],
    ])
    fmax = np.nanmax(stack, axis=0)
    fmin = np.nanmin(stack, axis=0)
    mask |= (fmax - fmin) > HOLDER_OSC_FACTOR * fmin
    return mask.ravel()


def hybrid_weight(grid: Grid2D, f_vals: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Blend weight per real node: 1 within h of X^s, 0 from 2h out, linear ramp."""
    if eps is None:
        eps = grid.h
    if eps <= 0:
        raise ValueError("eps must be positive")
    mask = singular_set_mask(grid, f_vals, eps).reshape(grid.n, grid.n)
    dist = ndimage.distance_transform_edt(~mask) * grid.h
    return np.clip(2.0 - dist / grid.h, 0.0, 1.0).ravel()


# -- vectorized operator ------------------------------------------------------


class MAOperator:
    """Vectorized residual/Jacobian evaluation over all real nodes.

    The unknown vector is the flattened padded grid plus the scalar c; the
    operator only fills the real-node rows (boundary rows live elsewhere).
    """

    def __init__(self, grid: Grid2D, bases=None, scheme: str = "hybrid",
                 delta: float = 1e-8, weights: np.ndarray | None = None):
        if scheme not in ("standard", "monotone", "hybrid"):
            raise ValueError(f"unknown scheme {scheme!r}")
        self.grid = grid
        self.bases = bases if bases is not None else generate_direction_bases(2)
        self.delta = float(delta)
        self.scheme = scheme
        n_real = grid.n * grid.n
        if scheme == "standard":
            self.w = np.zeros(n_real)
        elif scheme == "monotone":
            self.w = np.ones(n_real)
        else:
            if weights is None:
                raise ValueError("hybrid scheme needs precomputed weights")
            self.w = np.asarray(weights, dtype=float)

        self.std = standard_ops(grid) if scheme != "monotone" else None
        self.S = {}
        self.T = {}
        if scheme != "standard":
            for b in self.bases:
                for v in b.vectors:
                    if v not in self.S:
                        self.S[v] = second_difference_op(grid, v)
                        self.T[v] = first_difference_op(grid, v)

    # Coefficients of the rotation identity grad u = sum_j (nu_j . e_m)/|nu_j| D_nuj u.
    @staticmethod
    def _rotation_coeffs(basis: DirectionBasis):
        out = []
        for v in basis.vectors:
            norm = math.hypot(*v)
            out.append((v, v[0] / norm, v[1] / norm))
        return out

    def residual(self, u: np.ndarray, c: float, rhs: RhsField):
        """Residual on real nodes.  Returns (values, info) with the active
        bases and cached fields needed by the Jacobian."""
        info = {"c": c}
        use_mono = self.scheme != "standard"
        use_std = self.scheme != "monotone"
        d = self.delta

        if use_std:
            d11 = self.std["d11"] @ u
            d22 = self.std["d22"] @ u
            d12 = self.std["d12"] @ u
            p_std = np.stack([self.std["d1"] @ u, self.std["d2"] @ u], axis=-1)
            F_std = rhs.F(p_std, c)
            val_std = d11 * d22 - d12 ** 2 - F_std
            info.update(d11=d11, d22=d22, d12=d12, p_std=p_std)

        if use_mono:
            curv = {v: self.S[v] @ u for v in self.S}
            dfirst = {v: self.T[v] @ u for v in self.T}
            G = np.empty((len(self.bases), len(self.grid.real_pad_flat)))
            p_by_basis = []
            for k, b in enumerate(self.bases):
                coeffs = self._rotation_coeffs(b)
                p1 = sum(c1 * dfirst[v] for v, c1, _ in coeffs)
                p2 = sum(c2 * dfirst[v] for v, _, c2 in coeffs)
                p = np.stack([p1, p2], axis=-1)
                p_by_basis.append(p)
                c1v, c2v = curv[b.nu1], curv[b.nu2]
                G[k] = (np.maximum(c1v, d) * np.maximum(c2v, d)
                        + np.minimum(c1v, d) + np.minimum(c2v, d)
                        - rhs.F(p, c))
            argmin = np.argmin(G, axis=0)  # first minimum wins: axes-first ordering
            val_mono = np.take_along_axis(G, argmin[None, :], axis=0)[0]
            info.update(curv=curv, p_by_basis=p_by_basis, argmin=argmin)

        if self.scheme == "standard":
            return val_std, info
        if self.scheme == "monotone":
            return val_mono, info
        return self.w * val_mono + (1.0 - self.w) * val_std, info

    def jacobian(self, u: np.ndarray, c: float, rhs: RhsField, info: dict):
        """Sparse Jacobian rows (n_real x n_unknowns) including the c column,
        using the active-basis (Danskin) derivative for the monotone part."""
        grid = self.grid
        n_real = grid.n * grid.n
        d = self.delta
        parts = []
        c_col = np.zeros(n_real)

        def scaled(coefs, op):
            m = op.matrix.multiply(coefs[:, None]).tocsr()
            m.eliminate_zeros()
            return m

        if self.scheme != "monotone":
            ws = 1.0 - self.w
            _, Fp_std, fog_std = rhs.F_and_grad(info["p_std"], c)
            parts.append(scaled(ws * info["d22"], self.std["d11"]))
            parts.append(scaled(ws * info["d11"], self.std["d22"]))
            parts.append(scaled(-2.0 * ws * info["d12"], self.std["d12"]))
            parts.append(scaled(-ws * Fp_std[:, 0], self.std["d1"]))
            parts.append(scaled(-ws * Fp_std[:, 1], self.std["d2"]))
            c_col += ws * (-fog_std)

        if self.scheme != "standard":
            wm = self.w
            argmin = info["argmin"]
            curv = info["curv"]
            p_active = np.empty((n_real, 2))
            for k in range(len(self.bases)):
                m = argmin == k
                p_active[m] = info["p_by_basis"][k][m]
            _, Fp_act, fog_act = rhs.F_and_grad(p_active, c)
            for k, b in enumerate(self.bases):
                m = (argmin == k) & (wm > 0)
                if not m.any():
                    continue
                sel = np.where(m, wm, 0.0)
                c1v, c2v = curv[b.nu1], curv[b.nu2]
                coef1 = np.maximum(c2v, d) * (c1v >= d) + (c1v < d)
                coef2 = np.maximum(c1v, d) * (c2v >= d) + (c2v < d)
                parts.append(scaled(sel * coef1, self.S[b.nu1]))
                parts.append(scaled(sel * coef2, self.S[b.nu2]))
                for v, r1, r2 in self._rotation_coeffs(b):
                    wgt = Fp_act[:, 0] * r1 + Fp_act[:, 1] * r2
                    parts.append(scaled(-sel * wgt, self.T[v]))
            c_col += wm * (-fog_act)

        J = parts[0]
        for p in parts[1:]:
            J = J + p
        row = np.arange(n_real)
        col = np.full(n_real, grid.n_unknowns - 1)
        J = J + sp.csr_matrix((c_col, (row, col)), shape=(n_real, grid.n_unknowns))
        return J.tocsr()


# -- scalar spec-level operations (single node) -------------------------------


def _scalar_F(rhs_g: Density, f_val: float, c: float, p: np.ndarray) -> float:
    gv = rhs_g.evaluate(p)
    if gv <= 0:
        raise ValueError("target density evaluated nonpositive")
    return c * f_val / gv


def ma_standard_residual(grid: Grid2D, u: np.ndarray, c: float, ij, f_val: float,
                         g: Density) -> float:
    i, j = ij
    h = grid.h
    d11 = (u[i + 1, j] + u[i - 1, j] - 2 * u[i, j]) / h ** 2
    d22 = (u[i, j + 1] + u[i, j - 1] - 2 * u[i, j]) / h ** 2
    d12 = (u[i + 1, j + 1] + u[i - 1, j - 1] - u[i - 1, j + 1] - u[i + 1, j - 1]) / (4 * h ** 2)
    p = np.array([(u[i + 1, j] - u[i - 1, j]) / (2 * h), (u[i, j + 1] - u[i, j - 1]) / (2 * h)])
    return d11 * d22 - d12 ** 2 - _scalar_F(g, f_val, c, p)


def gradient_from_basis(grid: Grid2D, u: np.ndarray, basis: DirectionBasis, ij) -> np.ndarray:
    """Gradient via the rotation identity on the basis directions."""
    p = np.zeros(2)
    for v in basis.vectors:
        dv, _ = first_directional(grid, u, ij, v)
        norm = math.hypot(*v)
        p[0] += v[0] / norm * dv
        p[1] += v[1] / norm * dv
    return p


def monotone_term(grid: Grid2D, u: np.ndarray, c: float, basis: DirectionBasis, ij,
                  f_val: float, g: Density, delta: float) -> float:
    c1 = second_directional(grid, u, ij, basis.nu1)
    c2 = second_directional(grid, u, ij, basis.nu2)
    p = gradient_from_basis(grid, u, basis, ij)
    return (max(c1, delta) * max(c2, delta) + min(c1, delta) + min(c2, delta)
            - _scalar_F(g, f_val, c, p))


def ma_monotone_residual(grid: Grid2D, u: np.ndarray, c: float, ij, f_val: float,
                         g: Density, params: MAOperatorParams):
    """Minimum of the basis terms; returns (value, argmin_basis).  Ties break
    to the first basis in the canonical (axes-first) ordering."""
    best, best_b = math.inf, None
    for b in params.bases:
        val = monotone_term(grid, u, c, b, ij, f_val, g, params.delta)
        if val < best:
            best, best_b = val, b
    return best, best_b


def ma_hybrid_residual(grid: Grid2D, u: np.ndarray, c: float, ij, f_val: float,
                       g: Density, params: MAOperatorParams, w: float) -> float:
    mono, _ = ma_monotone_residual(grid, u, c, ij, f_val, g, params)
    if w >= 1.0:
        return mono
    std = ma_standard_residual(grid, u, c, ij, f_val, g)
    return w * mono + (1.0 - w) * std
