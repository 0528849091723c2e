"""Uniform square grid with a single ghost layer and wide-stencil differences.

The grid covers a square [a,b] x [a,b] with n nodes per side, spacing
h = (b - a)/(n - 1), plus one layer of ghost nodes at distance h outside the
square.  Arrays are stored padded, shape (n+2, n+2); padded index (i, j) with
i, j in 0..n+1, real nodes at 1..n.  The unknown vector of the solvers is the
flattened padded array followed by one extra scalar, so its length is
(n+2)**2 + 1.

Directional derivatives along an integer vector nu use centered differences

    D_nunu u = (u(x + nu h) + u(x - nu h) - 2 u(x)) / (|nu|^2 h^2)
    D_nu   u = (u(x + nu h) - u(x - nu h)) / (2 |nu| h)

with steps reaching up to two cells for the 17-point stencil.  Where a step
leaves the ghost hull, the ray is clipped at the hull face and the endpoint
value is linearly interpolated between the two straddling nodes; the
three-point formula with unequal arms keeps nonnegative off-center weights,
so the scheme rows stay monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SIDES = ("x1min", "x1max", "x2min", "x2max")

# Outward unit normals per side.
SIDE_NORMALS = {
    "x1min": np.array([-1.0, 0.0]),
    "x1max": np.array([1.0, 0.0]),
    "x2min": np.array([0.0, -1.0]),
    "x2max": np.array([0.0, 1.0]),
}

# Corners ordered (min,min), (max,min), (min,max), (max,max); outward
# diagonal directions point away from the square.
CORNER_DIAGS = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]) / math.sqrt(2.0)


@dataclass(frozen=True)
class DirectionBasis:
    """Orthogonal pair of integer grid vectors, nu2 = +90 degree rotation of nu1."""

    nu1: tuple[int, int]
    nu2: tuple[int, int]

    @property
    def norms(self) -> tuple[float, float]:
        return (math.hypot(*self.nu1), math.hypot(*self.nu2))

    @property
    def vectors(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return (self.nu1, self.nu2)


def _primitive(v: tuple[int, int]) -> bool:
    return math.gcd(abs(v[0]), abs(v[1])) == 1


def generate_direction_bases(width: int) -> list[DirectionBasis]:
    """All orthogonal integer bases with components in [-width, width].

    Bases are deduplicated up to sign and order: nu1 is the primitive vector
    with angle in [0, pi/2), nu2 its +90 degree rotation.  Returned sorted by
    the angle of nu1, so the axis basis comes first (deterministic argmin
    tie-breaking relies on this).
    """
    if width not in (1, 2):
        raise ValueError(f"unsupported stencil width {width}; expected 1 or 2")
    out = []
    for a in range(0, width + 1):
        for b in range(0, width + 1):
            v = (a, b)
            if v == (0, 0) or not _primitive(v):
                continue
            if not (0 <= math.atan2(b, a) < math.pi / 2):
                continue
            rot = (-b, a)
            if max(abs(rot[0]), abs(rot[1])) <= width:
                out.append(DirectionBasis(v, rot))
    out.sort(key=lambda bs: math.atan2(bs.nu1[1], bs.nu1[0]))
    return out


def angular_resolution(bases: list[DirectionBasis]) -> float:
    """Largest angular gap between consecutive signed stencil directions."""
    angles = []
    for bs in bases:
        for v in bs.vectors:
            for s in (1, -1):
                angles.append(math.atan2(s * v[1], s * v[0]) % (2 * math.pi))
    angles = np.sort(np.unique(angles))
    gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))
    return float(gaps.max())


class Grid2D:
    """n x n nodes on a square, one ghost layer, square cells."""

    def __init__(self, n: int, rect: tuple[float, float, float, float]):
        x1min, x1max, x2min, x2max = rect
        if n < 4:
            raise ValueError(f"need at least 4 nodes per side, got {n}")
        if not math.isclose(x1max - x1min, x2max - x2min, rel_tol=1e-12):
            raise ValueError("grid rectangle must be a square")
        if x1max <= x1min:
            raise ValueError("degenerate rectangle")
        self.n = n
        self.lo = np.array([x1min, x2min])
        self.hi = np.array([x1max, x2max])
        self.h = (x1max - x1min) / (n - 1)
        self.np_side = n + 2  # padded side length
        self.n_pad = self.np_side ** 2
        self.n_unknowns = self.n_pad + 1  # + solvability constant c

        # Padded coordinates (ghosts one h outside).
        i = np.arange(self.np_side)
        self.x1_pad = x1min + (i - 1) * self.h
        self.x2_pad = x2min + (i - 1) * self.h

        ii, jj = np.meshgrid(np.arange(self.np_side), np.arange(self.np_side), indexing="ij")
        self.is_ghost = (ii == 0) | (ii == n + 1) | (jj == 0) | (jj == n + 1)
        self.is_real = ~self.is_ghost
        on_b1 = (ii == 1) | (ii == n)
        on_b2 = (jj == 1) | (jj == n)
        self.is_corner = self.is_real & on_b1 & on_b2
        self.is_edge = self.is_real & (on_b1 ^ on_b2)
        self.is_interior = self.is_real & ~on_b1 & ~on_b2

        # Flat padded indices of real nodes, row-major over (i, j) in 1..n.
        ri, rj = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1), indexing="ij")
        self.real_pad_flat = (ri * self.np_side + rj).ravel()
        self.X1 = self.x1_pad[ri]
        self.X2 = self.x2_pad[rj]

        # Real boundary-node flat offsets into the real-node (n*n) ordering.
        self._real_index = -np.ones((self.np_side, self.np_side), dtype=np.int64)
        self._real_index[1:-1, 1:-1] = np.arange(n * n).reshape(n, n)

        self.corners_pad = [(1, 1), (n, 1), (1, n), (n, n)]
        self.corner_ghosts_pad = [(0, 0), (n + 1, 0), (0, n + 1), (n + 1, n + 1)]
        self.pin_corner = (1, 1)

    # -- index helpers -------------------------------------------------------

    def pad_flat(self, i, j):
        return i * self.np_side + j

    def real_index(self, i, j):
        """Index into the n*n real-node ordering; -1 for ghosts."""
        return self._real_index[i, j]

    def in_hull(self, i, j) -> bool:
        return 0 <= i <= self.n + 1 and 0 <= j <= self.n + 1

    def node_xy(self, i, j) -> np.ndarray:
        return np.array([self.x1_pad[i], self.x2_pad[j]])

    def side_nodes(self, side: str):
        """Padded (i, j) arrays of the n real nodes of one side, in order."""
        n = self.n
        k = np.arange(1, n + 1)
        if side == "x1min":
            return np.full(n, 1), k
        if side == "x1max":
            return np.full(n, n), k
        if side == "x2min":
            return k, np.full(n, 1)
        if side == "x2max":
            return k, np.full(n, n)
        raise KeyError(side)

    def side_ghosts(self, side: str):
        """Padded (i, j) arrays of the ghosts across each side node."""
        n = self.n
        k = np.arange(1, n + 1)
        if side == "x1min":
            return np.full(n, 0), k
        if side == "x1max":
            return np.full(n, n + 1), k
        if side == "x2min":
            return k, np.full(n, 0)
        if side == "x2max":
            return k, np.full(n, n + 1)
        raise KeyError(side)

    def counts(self) -> dict:
        return {
            "real": int(self.is_real.sum()),
            "ghost": int(self.is_ghost.sum()),
            "corner": int(self.is_corner.sum()),
            "edge": int(self.is_edge.sum()),
            "interior": int(self.is_interior.sum()),
        }


def build_grid(n: int, rect: tuple[float, float, float, float]) -> Grid2D:
    return Grid2D(n, rect)


@dataclass
class GridFunction:
    """Values on all padded nodes (real + ghost) of a grid."""

    grid: Grid2D
    values: np.ndarray  # shape (n+2, n+2)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "GridFunction":
        return cls(grid, np.zeros((grid.np_side, grid.np_side)))

    @classmethod
    def from_callable(cls, grid: Grid2D, fn) -> "GridFunction":
        x1, x2 = np.meshgrid(grid.x1_pad, grid.x2_pad, indexing="ij")
        return cls(grid, np.asarray(fn(x1, x2), dtype=float) + np.zeros_like(x1))

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def real_values(self) -> np.ndarray:
        return self.values[1:-1, 1:-1].ravel()

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("grid function contains non-finite values")


# -- directional difference stencils ----------------------------------------


def _clip_arm(grid: Grid2D, i: int, j: int, a: int, b: int):
    """Clip the step (a, b) from real node (i, j) at the ghost hull.

    Returns (t, [(ii, jj, w), ...]): t in (0, 1] is the realized step
    fraction; the weighted nodes interpolate u at the clipped endpoint.
    Weights are nonnegative and sum to one.
    """
    m = grid.n + 1
    t = 1.0
    if a > 0:
        t = min(t, (m - i) / a)
    elif a < 0:
        t = min(t, i / (-a))
    if b > 0:
        t = min(t, (m - j) / b)
    elif b < 0:
        t = min(t, j / (-b))
    if t <= 0:
        raise AssertionError("stencil arm fully outside the hull (ghost start node?)")
    ei = i + t * a
    ej = j + t * b
    fi, fj = int(math.floor(ei + 1e-12)), int(math.floor(ej + 1e-12))
    ri, rj = ei - fi, ej - fj
    pts = []
    for di, wi in ((0, 1.0 - ri), (1, ri)):
        for dj, wj in ((0, 1.0 - rj), (1, rj)):
            w = wi * wj
            if w > 1e-14:
                pts.append((fi + di, fj + dj, w))
    return t, pts


def near_boundary_interpolation(grid: Grid2D, ij: tuple[int, int], nu: tuple[int, int]):
    """Substitute stencils for the +nu and -nu arms at a real node.

    Each entry is (t, [(i, j, weight), ...]); t == 1 with a single unit-weight
    node means the plain stencil point was available (identity passthrough).
    """
    i, j = ij
    a, b = nu
    return _clip_arm(grid, i, j, a, b), _clip_arm(grid, i, j, -a, -b)


def _second_diff_entries(grid: Grid2D, i: int, j: int, nu: tuple[int, int]):
    """(node, coefficient) list for D_nunu at one node, clipped arms allowed."""
    a, b = nu
    (tp, pts_p), (tm, pts_m) = near_boundary_interpolation(grid, (i, j), nu)
    L2 = (a * a + b * b) * grid.h ** 2
    cp = 2.0 / (tp * (tp + tm)) / L2
    cm = 2.0 / (tm * (tp + tm)) / L2
    cc = -2.0 / (tp * tm) / L2
    ent = [(ii, jj, w * cp) for ii, jj, w in pts_p]
    ent += [(ii, jj, w * cm) for ii, jj, w in pts_m]
    ent.append((i, j, cc))
    return ent


def second_directional(grid: Grid2D, u: np.ndarray, ij: tuple[int, int], nu: tuple[int, int]) -> float:
    """Centered second difference along nu at one real node."""
    val = 0.0
    for ii, jj, c in _second_diff_entries(grid, ij[0], ij[1], nu):
        val += c * u[ii, jj]
    return val


def first_directional(grid: Grid2D, u: np.ndarray, ij: tuple[int, int], nu: tuple[int, int]):
    """First difference along nu; falls back to one-sided near the hull.

    Returns (value, one_sided).
    """
    i, j = ij
    a, b = nu
    L = math.hypot(a, b) * grid.h
    plus = grid.in_hull(i + a, j + b)
    minus = grid.in_hull(i - a, j - b)
    if plus and minus:
        return (u[i + a, j + b] - u[i - a, j - b]) / (2 * L), False
    if plus:
        return (u[i + a, j + b] - u[i, j]) / L, True
    if minus:
        return (u[i, j] - u[i - a, j - b]) / L, True
    raise AssertionError("both arms outside hull")


class DifferenceOperator:
    """Sparse map from the unknown vector to a per-real-node derivative."""

    def __init__(self, matrix: sp.csr_matrix, one_sided: np.ndarray | None = None):
        self.matrix = matrix
        self.one_sided = one_sided

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


def _collect(grid: Grid2D, entries_fn) -> sp.csr_matrix:
    n = grid.n
    rows, cols, vals = [], [], []
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            r = grid.real_index(i, j)
            for ii, jj, c in entries_fn(i, j):
                rows.append(r)
                cols.append(grid.pad_flat(ii, jj))
                vals.append(c)
    return sp.csr_matrix(
        (vals, (rows, cols)), shape=(n * n, grid.n_unknowns)
    )


def second_difference_op(grid: Grid2D, nu: tuple[int, int]) -> DifferenceOperator:
    return DifferenceOperator(_collect(grid, lambda i, j: _second_diff_entries(grid, i, j, nu)))


def first_difference_op(grid: Grid2D, nu: tuple[int, int]) -> DifferenceOperator:
    a, b = nu
    L = math.hypot(a, b) * grid.h
    one_sided = np.zeros(grid.n * grid.n, dtype=bool)

    def entries(i, j):
        plus = grid.in_hull(i + a, j + b)
        minus = grid.in_hull(i - a, j - b)
        if plus and minus:
            return [(i + a, j + b, 1 / (2 * L)), (i - a, j - b, -1 / (2 * L))]
        one_sided[grid.real_index(i, j)] = True
        if plus:
            return [(i + a, j + b, 1 / L), (i, j, -1 / L)]
        return [(i, j, 1 / L), (i - a, j - b, -1 / L)]

    return DifferenceOperator(_collect(grid, entries), one_sided)


def cross_difference_op(grid: Grid2D) -> DifferenceOperator:
    """Standard centered mixed derivative D_x1x2 (all four diagonal neighbors
    exist in the padded array for every real node)."""
    c = 1.0 / (4 * grid.h ** 2)

    def entries(i, j):
        return [
            (i + 1, j + 1, c),
            (i - 1, j - 1, c),
            (i - 1, j + 1, -c),
            (i + 1, j - 1, -c),
        ]

    return DifferenceOperator(_collect(grid, entries))


def standard_ops(grid: Grid2D) -> dict:
    """The five centered operators of the standard discretization."""
    return {
        "d11": second_difference_op(grid, (1, 0)),
        "d22": second_difference_op(grid, (0, 1)),
        "d12": cross_difference_op(grid),
        "d1": first_difference_op(grid, (1, 0)),
        "d2": first_difference_op(grid, (0, 1)),
    }
