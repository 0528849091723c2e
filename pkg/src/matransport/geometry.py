"""Target regions: membership tests and nearest-point projection onto the boundary.

Every region supports

    contains(p)             -- p in closure(Y)
    project_to_boundary(p)  -- global minimizer of |y - p| over y on the boundary
    boundary_samples(k)     -- approximately arc-length-uniform boundary points

Projections feed the Neumann-data update, so they must be total (p may be far
outside or inside the region) and deterministic under ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq


class ProjectionError(RuntimeError):
    pass


def _as_point(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(2)


def _project_segments(p: np.ndarray, va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Closest point to p over the segments va[k]->vb[k]; first-index tie-break."""
    d = vb - va
    L2 = np.maximum((d * d).sum(axis=1), 1e-300)
    t = np.clip(((p - va) * d).sum(axis=1) / L2, 0.0, 1.0)
    cand = va + t[:, None] * d
    dist = np.hypot(*(cand - p).T)
    return cand[int(np.argmin(dist))]


def _project_segments_many(P: np.ndarray, va: np.ndarray, vb: np.ndarray,
                           chunk: int = 2048) -> np.ndarray:
    """Closest point over the segments for each query point (chunked broadcast)."""
    d = vb - va
    L2 = np.maximum((d * d).sum(axis=1), 1e-300)
    out = np.empty_like(P)
    for s in range(0, len(P), chunk):
        Pc = P[s:s + chunk]
        W = Pc[:, None, :] - va[None, :, :]
        t = np.clip((W * d[None, :, :]).sum(axis=2) / L2[None, :], 0.0, 1.0)
        cand = va[None, :, :] + t[:, :, None] * d[None, :, :]
        diff = cand - Pc[:, None, :]
        dist = np.hypot(diff[:, :, 0], diff[:, :, 1])
        k = np.argmin(dist, axis=1)
        out[s:s + chunk] = cand[np.arange(len(Pc)), k]
    return out


class TargetBoundary:
    """Base class; concrete regions override the three geometric queries."""

    tol_geom: float = 1e-9

    def contains(self, p) -> bool:
        raise NotImplementedError

    def project_to_boundary(self, p) -> np.ndarray:
        raise NotImplementedError

    def boundary_samples(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.boundary_samples(512)
        return s.min(axis=0), s.max(axis=0)

    def signed_distance(self, p) -> float:
        """Negative inside, positive outside (distance to the boundary)."""
        p = _as_point(p)
        d = float(np.hypot(*(p - self.project_to_boundary(p))))
        return -d if self.contains(p) else d

    # Vectorized queries; subclasses override with numpy implementations
    # (density extension evaluates tens of thousands of points per call).
    def contains_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return np.fromiter((self.contains(p) for p in P), bool, len(P))

    def project_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return np.array([self.project_to_boundary(p) for p in P]).reshape(-1, 2)


def _walk_polyline(verts: np.ndarray, k: int) -> np.ndarray:
    """k arc-length-uniform samples along a closed polyline (first == last)."""
    seg = np.diff(verts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    s = np.arange(k) * total / k
    idx = np.searchsorted(cum, s, side="right") - 1
    idx = np.clip(idx, 0, len(lens) - 1)
    frac = (s - cum[idx]) / np.maximum(lens[idx], 1e-300)
    return verts[idx] + frac[:, None] * seg[idx]


def _winding_contains(verts: np.ndarray, p: np.ndarray, tol: float) -> bool:
    """Even-odd crossing test on a closed polyline, boundary counted inside."""
    a = verts[:-1]
    b = verts[1:]
    # On-boundary check within tol.
    d = b - a
    L2 = np.maximum((d * d).sum(axis=1), 1e-300)
    t = np.clip(((p - a) * d).sum(axis=1) / L2, 0.0, 1.0)
    near = a + t[:, None] * d
    if np.min(np.hypot(*(near - p).T)) <= tol:
        return True
    cond = (a[:, 1] > p[1]) != (b[:, 1] > p[1])
    if not cond.any():
        return False
    aa, bb = a[cond], b[cond]
    xs = aa[:, 0] + (p[1] - aa[:, 1]) * (bb[:, 0] - aa[:, 0]) / (bb[:, 1] - aa[:, 1])
    return bool(np.count_nonzero(xs > p[0]) % 2 == 1)


@dataclass
class Rectangle(TargetBoundary):
    lo: tuple[float, float]
    hi: tuple[float, float]
    tol_geom: float = 1e-9

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if not np.all(self.hi > self.lo):
            raise ValueError("degenerate rectangle")

    def contains(self, p) -> bool:
        p = _as_point(p)
        t = self.tol_geom
        return bool(np.all(p >= self.lo - t) and np.all(p <= self.hi + t))

    def project_to_boundary(self, p) -> np.ndarray:
        p = _as_point(p)
        if not (np.all(p > self.lo) and np.all(p < self.hi)):
            # Outside or on the boundary: clamping is the nearest boundary point.
            return np.clip(p, self.lo, self.hi)
        # Strict interior: snap the coordinate closest to a face.
        gaps = np.concatenate([p - self.lo, self.hi - p])
        k = int(np.argmin(gaps))
        q = p.copy()
        if k == 0:
            q[0] = self.lo[0]
        elif k == 1:
            q[1] = self.lo[1]
        elif k == 2:
            q[0] = self.hi[0]
        else:
            q[1] = self.hi[1]
        return q

    def contains_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        t = self.tol_geom
        return np.all((P >= self.lo - t) & (P <= self.hi + t), axis=1)

    def project_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        Q = np.clip(P, self.lo, self.hi)
        interior = np.all((P > self.lo) & (P < self.hi), axis=1)
        if interior.any():
            Pi = P[interior]
            gaps = np.stack([Pi[:, 0] - self.lo[0], Pi[:, 1] - self.lo[1],
                             self.hi[0] - Pi[:, 0], self.hi[1] - Pi[:, 1]], axis=1)
            k = np.argmin(gaps, axis=1)
            Qi = Pi.copy()
            Qi[k == 0, 0] = self.lo[0]
            Qi[k == 1, 1] = self.lo[1]
            Qi[k == 2, 0] = self.hi[0]
            Qi[k == 3, 1] = self.hi[1]
            Q[interior] = Qi
        return Q

    def corners(self) -> np.ndarray:
        (a, b), (c, d) = self.lo, self.hi
        return np.array([[a, b], [c, b], [c, d], [a, d]])

    def boundary_samples(self, k: int) -> np.ndarray:
        v = np.vstack([self.corners(), self.corners()[:1]])
        return _walk_polyline(v, k)

    def interior_point(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def bbox(self):
        return self.lo.copy(), self.hi.copy()


@dataclass
class Disc(TargetBoundary):
    center: tuple[float, float]
    radius: float
    tol_geom: float = 1e-9

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def contains(self, p) -> bool:
        return bool(np.hypot(*(_as_point(p) - self.center)) <= self.radius + self.tol_geom)

    def project_to_boundary(self, p) -> np.ndarray:
        v = _as_point(p) - self.center
        r = np.hypot(*v)
        if r < 1e-300:
            return self.center + np.array([self.radius, 0.0])  # center tie-break: angle 0
        return self.center + v * (self.radius / r)

    def contains_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return np.hypot(P[:, 0] - self.center[0], P[:, 1] - self.center[1]) <= self.radius + self.tol_geom

    def project_many(self, P: np.ndarray) -> np.ndarray:
        V = np.asarray(P, dtype=float) - self.center
        r = np.maximum(np.hypot(V[:, 0], V[:, 1]), 1e-300)
        Q = self.center + V * (self.radius / r)[:, None]
        Q[r <= 1e-300] = self.center + np.array([self.radius, 0.0])
        return Q

    def boundary_samples(self, k: int) -> np.ndarray:
        th = 2 * math.pi * np.arange(k) / k
        return self.center + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def interior_point(self) -> np.ndarray:
        return self.center.copy()

    def bbox(self):
        r = self.radius
        return self.center - r, self.center + r


@dataclass
class Ellipse(TargetBoundary):
    """Image of the unit disc under a nonsingular 2x2 matrix, translated.

    The region depends on the matrix only through M M^T; the canonical
    symmetric representative (principal axes + semi-axis lengths) is computed
    once and used for projection and sampling.
    """

    matrix: np.ndarray
    center: tuple[float, float] = (0.0, 0.0)
    tol_geom: float = 1e-9

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(2, 2)
        self.center = np.asarray(self.center, dtype=float)
        if abs(np.linalg.det(self.matrix)) < 1e-14:
            raise ValueError("ellipse matrix must be nonsingular")
        self.inv = np.linalg.inv(self.matrix)
        w, v = np.linalg.eigh(self.matrix @ self.matrix.T)
        order = np.argsort(w)[::-1]
        self.axes = np.sqrt(w[order])  # semi-axes, descending
        self.rot = v[:, order]  # columns: principal directions

    def contains(self, p) -> bool:
        q = self.inv @ (_as_point(p) - self.center)
        return bool(np.hypot(*q) <= 1.0 + self.tol_geom / max(self.axes[1], 1e-300))

    def _project_axis_frame(self, q: np.ndarray) -> np.ndarray:
        a1, a2 = self.axes
        s = np.sign(q)
        s[s == 0] = 1.0
        qa = np.abs(q)
        if qa[0] < 1e-14 and qa[1] < 1e-14:
            return np.array([a1, 0.0])  # center: deterministic angle-0 tie-break
        # On-axis cases with an off-axis nearest point (inside the evolute).
        if qa[1] < 1e-14 and a1 > a2:
            if qa[0] < (a1 * a1 - a2 * a2) / a1:
                y1 = a1 * a1 * qa[0] / (a1 * a1 - a2 * a2)
                y2 = a2 * math.sqrt(max(0.0, 1.0 - (y1 / a1) ** 2))
                return np.array([s[0] * y1, y2])  # +y2 tie-break
            return np.array([s[0] * a1, 0.0])
        if qa[0] < 1e-14 and a2 > a1:
            if qa[1] < (a2 * a2 - a1 * a1) / a2:
                y2 = a2 * a2 * qa[1] / (a2 * a2 - a1 * a1)
                y1 = a1 * math.sqrt(max(0.0, 1.0 - (y2 / a2) ** 2))
                return np.array([y1, s[1] * y2])
            return np.array([0.0, s[1] * a2])

        def g(lam):
            val = 0.0
            if qa[0] > 0:
                val += (a1 * qa[0] / (lam + a1 * a1)) ** 2
            if qa[1] > 0:
                val += (a2 * qa[1] / (lam + a2 * a2)) ** 2
            return val - 1.0

        amin2 = min(a1, a2) ** 2
        lo = -amin2 * (1.0 - 1e-12) if min(qa) > 0 else -amin2 + 1e-300
        # Expand the bracket upward until g < 0.
        hi = max(a1 * qa[0] + a1 * a1, a2 * qa[1] + a2 * a2)
        while g(hi) > 0:
            hi *= 2
        lam = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
        y = np.array([a1 * a1 * qa[0] / (lam + a1 * a1), a2 * a2 * qa[1] / (lam + a2 * a2)])
        return s * y

    def project_to_boundary(self, p) -> np.ndarray:
        q = self.rot.T @ (_as_point(p) - self.center)
        return self.center + self.rot @ self._project_axis_frame(q)

    def contains_many(self, P: np.ndarray) -> np.ndarray:
        Q = (np.asarray(P, dtype=float) - self.center) @ self.inv.T
        return np.hypot(Q[:, 0], Q[:, 1]) <= 1.0 + self.tol_geom / max(self.axes[1], 1e-300)

    def project_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        Q = (P - self.center) @ self.rot
        a1, a2 = self.axes
        qa = np.abs(Q)
        sg = np.where(Q >= 0, 1.0, -1.0)
        near_axis = (qa[:, 0] < 1e-12) | (qa[:, 1] < 1e-12)
        out = np.empty_like(P)
        # Bulk: vector bisection on the Lagrange parameter.
        bulk = ~near_axis
        if bulk.any():
            q = qa[bulk]
            lo = np.full(len(q), -min(a1, a2) ** 2 * (1.0 - 1e-12))
            hi = 2.0 * np.maximum(a1 * q[:, 0], a2 * q[:, 1]) + max(a1, a2) ** 2

            def gval(lam):
                return ((a1 * q[:, 0] / (lam + a1 * a1)) ** 2
                        + (a2 * q[:, 1] / (lam + a2 * a2)) ** 2 - 1.0)

            for _ in range(100):
                mid = 0.5 * (lo + hi)
                pos = gval(mid) > 0
                lo = np.where(pos, mid, lo)
                hi = np.where(pos, hi, mid)
            lam = 0.5 * (lo + hi)
            y = np.stack([a1 * a1 * q[:, 0] / (lam + a1 * a1),
                          a2 * a2 * q[:, 1] / (lam + a2 * a2)], axis=1)
            out[bulk] = sg[bulk] * y
        for k in np.where(near_axis)[0]:
            out[k] = self._project_axis_frame(Q[k])
        return self.center + out @ self.rot.T

    def boundary_samples(self, k: int) -> np.ndarray:
        a1, a2 = self.axes
        # Invert arc length via a dense parameter table.
        m = max(4096, 8 * k)
        th = 2 * math.pi * np.arange(m + 1) / m
        speed = np.hypot(a1 * np.sin(th), a2 * np.cos(th))
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * (th[1] - th[0]))])
        s = np.arange(k) * cum[-1] / k
        t = np.interp(s, cum, th)
        pts = np.stack([a1 * np.cos(t), a2 * np.sin(t)], axis=1)
        return self.center + pts @ self.rot.T

    def interior_point(self) -> np.ndarray:
        return self.center.copy()


@dataclass
class ConvexPolygon(TargetBoundary):
    vertices: np.ndarray  # CCW, not repeated
    tol_geom: float = 1e-9

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs >= 3 vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 <= 0:
            raise ValueError("vertices must be counterclockwise")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12):
            raise ValueError("polygon is not convex")
        self.vertices = v

    def contains(self, p) -> bool:
        p = _as_point(p)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        w = p - v
        cross = e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]
        scale = np.hypot(e[:, 0], e[:, 1])
        return bool(np.all(cross >= -self.tol_geom * scale))

    def project_to_boundary(self, p) -> np.ndarray:
        v = self.vertices
        return _project_segments(_as_point(p), v, np.roll(v, -1, axis=0))

    def contains_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        scale = np.hypot(e[:, 0], e[:, 1])
        W = P[:, None, :] - v[None, :, :]
        cross = e[None, :, 0] * W[:, :, 1] - e[None, :, 1] * W[:, :, 0]
        return np.all(cross >= -self.tol_geom * scale[None, :], axis=1)

    def project_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        va = self.vertices
        vb = np.roll(va, -1, axis=0)
        return _project_segments_many(P, va, vb)

    def boundary_samples(self, k: int) -> np.ndarray:
        v = np.vstack([self.vertices, self.vertices[:1]])
        return _walk_polyline(v, k)

    def interior_point(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass
class PolylineRegion(TargetBoundary):
    """Region bounded by a closed sample polyline (first sample == last).

    Supports non-convex boundaries; projection is nearest-segment search, so
    the polyline resolution should sit below the solver grid spacing.
    """

    polyline: np.ndarray
    tol_geom: float = 1e-9

    def __post_init__(self):
        v = np.asarray(self.polyline, dtype=float)
        if not np.allclose(v[0], v[-1]):
            raise ValueError("polyline must be closed (first == last)")
        self.polyline = v

    def contains(self, p) -> bool:
        return _winding_contains(self.polyline, _as_point(p), self.tol_geom)

    def project_to_boundary(self, p) -> np.ndarray:
        v = self.polyline
        return _project_segments(_as_point(p), v[:-1], v[1:])

    def _vertex_tree(self):
        if not hasattr(self, "_tree"):
            from scipy.spatial import cKDTree

            self._tree = cKDTree(self.polyline[:-1])
        return self._tree

    def contains_many(self, P: np.ndarray, chunk: int = 4096) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        a, b = self.polyline[:-1], self.polyline[1:]
        out = np.empty(len(P), dtype=bool)
        for s in range(0, len(P), chunk):
            Pc = P[s:s + chunk]
            cond = (a[None, :, 1] > Pc[:, 1, None]) != (b[None, :, 1] > Pc[:, 1, None])
            with np.errstate(divide="ignore", invalid="ignore"):
                xs = a[None, :, 0] + (Pc[:, 1, None] - a[None, :, 1]) * (
                    b[None, :, 0] - a[None, :, 0]) / (b[None, :, 1] - a[None, :, 1])
            hit = cond & (xs > Pc[:, 0, None])
            out[s:s + chunk] = np.count_nonzero(hit, axis=1) % 2 == 1
        return out

    def project_many(self, P: np.ndarray, k_near: int = 24) -> np.ndarray:
        """Nearest boundary point per query; segment candidates come from the
        k nearest polyline vertices (exact for boundaries sampled finely
        relative to the query distances, which the region construction
        guarantees)."""
        P = np.asarray(P, dtype=float)
        m = len(self.polyline) - 1
        if m <= 2 * k_near:
            return _project_segments_many(P, self.polyline[:-1], self.polyline[1:])
        _, idx = self._vertex_tree().query(P, k=min(k_near, m))
        segs = np.unique(np.concatenate([idx, (idx - 1) % m], axis=1), axis=1)
        a_all, b_all = self.polyline[:-1], self.polyline[1:]
        out = np.empty_like(P)
        for r in range(len(P)):
            ss = segs[r]
            out[r] = _project_segments(P[r], a_all[ss], b_all[ss])
        return out

    def boundary_samples(self, k: int) -> np.ndarray:
        return _walk_polyline(self.polyline, k)

    def interior_point(self) -> np.ndarray:
        c = self.polyline[:-1].mean(axis=0)
        if self.contains(c):
            return c
        # Fall back to the midpoint of a horizontal chord through the bbox center.
        lo, hi = self.polyline.min(axis=0), self.polyline.max(axis=0)
        ys = 0.5 * (lo[1] + hi[1])
        xs = np.linspace(lo[0], hi[0], 512)
        inside = [x for x in xs if self.contains((x, ys))]
        if not inside:
            raise ProjectionError("no interior point found")
        return np.array([inside[len(inside) // 2], ys])


@dataclass
class UnionRegion(TargetBoundary):
    members: list
    tol_geom: float = 1e-9

    def contains(self, p) -> bool:
        return any(m.contains(p) for m in self.members)

    def project_to_boundary(self, p) -> np.ndarray:
        p = _as_point(p)
        best, bd = None, np.inf
        for m in self.members:
            q = m.project_to_boundary(p)
            d = np.hypot(*(q - p))
            if d < bd - 1e-15:
                best, bd = q, d
        return best

    def contains_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        out = np.zeros(len(P), dtype=bool)
        for m in self.members:
            out |= m.contains_many(P)
        return out

    def project_many(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        best = self.members[0].project_many(P)
        bd = np.hypot(*(best - P).T)
        for m in self.members[1:]:
            q = m.project_many(P)
            d = np.hypot(*(q - P).T)
            swap = d < bd - 1e-15
            best[swap] = q[swap]
            bd = np.minimum(bd, d)
        return best

    def boundary_samples(self, k: int) -> np.ndarray:
        per = []
        for m in self.members:
            s = m.boundary_samples(256)
            per.append(np.hypot(*np.diff(np.vstack([s, s[:1]]), axis=0).T).sum())
        per = np.array(per)
        counts = np.maximum(1, np.round(k * per / per.sum()).astype(int))
        return np.vstack([m.boundary_samples(c) for m, c in zip(self.members, counts)])

    def interior_point(self) -> np.ndarray:
        return self.members[0].interior_point()

    def bbox(self):
        boxes = [m.bbox() for m in self.members]
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo, hi


def half_plane_clipped_disc(center, radius, axis_value, keep_greater: bool) -> PolylineRegion:
    """Half-disc {x1 > v} (or <) of a disc, as a closed polyline region."""
    cx, cy = center
    # Chord at x1 = axis_value.
    dx = axis_value - cx
    half = math.sqrt(max(0.0, radius * radius - dx * dx))
    th0 = math.atan2(-half, dx)
    th1 = math.atan2(half, dx)
    if keep_greater:
        th = np.linspace(th0, th1, 512)
    else:
        th = np.linspace(th1, th0 + 2 * math.pi, 512)
    arc = np.stack([cx + radius * np.cos(th), cy + radius * np.sin(th)], axis=1)
    pts = np.vstack([arc, arc[:1]])
    return PolylineRegion(pts)
