"""Incremental Bowyer-Watson Delaunay triangulation of 2-D point sets.

Points are inserted in index order; for exactly cocircular configurations
the strictly-inside circumcircle test leaves the earlier diagonal in
place, so ties resolve by lexicographic index order. The per-insertion
circumcircle scan is vectorized over the live triangle arrays, which keeps
20k-point masks in the seconds range without spatial indexing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError

# strictly-inside slack: points within this relative distance of the
# circumcircle count as on it and do not trigger re-triangulation
_ON_CIRCLE_RTOL = 1e-12
_SUPER_SCALE = 1e3


class TriangulationError(DataError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Triangle surface over 3-D vertices (2.5-D: triangles index vertices)."""

    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        triangles = np.asarray(self.triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise DataError(f"vertices must be Vx3, got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise DataError(f"triangles must be Tx3, got {triangles.shape}")
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise DataError("triangle vertex index out of range")
            a = vertices[triangles[:, 0]]
            cross = np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)
            if (np.linalg.norm(cross, axis=1) == 0).any():
                raise DataError("degenerate (zero-area) triangle in mesh")
        for arr in (vertices, triangles):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)


def _circumcircles(a, b, c):
    """Centers, squared radii and orientation dets of triangles (a, b, c)."""
    bx = b[:, 0] - a[:, 0]
    by = b[:, 1] - a[:, 1]
    cx = c[:, 0] - a[:, 0]
    cy = c[:, 1] - a[:, 1]
    det = 2.0 * (bx * cy - by * cx)
    bl = bx * bx + by * by
    cl = cx * cx + cy * cy
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (cy * bl - by * cl) / det
        uy = (bx * cl - cx * bl) / det
    degenerate = det == 0.0
    ux = np.where(degenerate, 0.0, ux)
    uy = np.where(degenerate, 0.0, uy)
    ccx = a[:, 0] + ux
    ccy = a[:, 1] + uy
    r2 = ux * ux + uy * uy
    r2 = np.where(degenerate, np.inf, r2)
    return ccx, ccy, r2, det


class _TriangleStore:
    """Growable arrays of triangles with cached circumcircle tests."""

    def __init__(self, capacity: int):
        self.tri = np.empty((capacity, 3), dtype=np.int64)
        self.ccx = np.empty(capacity)
        self.ccy = np.empty(capacity)
        # threshold = |cc|^2 - r^2 (1 - rtol); p strictly inside iff
        # 2 p.cc - threshold > |p|^2
        self.threshold = np.empty(capacity)
        self.alive = np.zeros(capacity, dtype=bool)
        self.count = 0
        self.dead = 0

    def _grow(self, needed: int):
        cap = max(len(self.tri) * 2, self.count + needed)
        for name in ("tri", "ccx", "ccy", "threshold", "alive"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self.count] = old[: self.count]
            setattr(self, name, new)

    def add(self, tris: np.ndarray, verts: np.ndarray):
        k = len(tris)
        if self.count + k > len(self.tri):
            self._grow(k)
        sl = slice(self.count, self.count + k)
        ccx, ccy, r2, _ = _circumcircles(verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]])
        self.tri[sl] = tris
        self.ccx[sl] = ccx
        self.ccy[sl] = ccy
        with np.errstate(invalid="ignore"):
            thr = ccx * ccx + ccy * ccy - r2 * (1.0 - _ON_CIRCLE_RTOL)
        self.threshold[sl] = np.where(np.isinf(r2), -np.inf, thr)
        self.alive[sl] = True
        self.count += k

    def bad_for(self, p: np.ndarray) -> np.ndarray:
        n = self.count
        score = 2.0 * (p[0] * self.ccx[:n] + p[1] * self.ccy[:n]) - self.threshold[:n]
        return np.nonzero(self.alive[:n] & (score > p[0] * p[0] + p[1] * p[1]))[0]

    def kill(self, idx: np.ndarray):
        self.alive[idx] = False
        self.dead += len(idx)

    def compact(self):
        keep = np.nonzero(self.alive[: self.count])[0]
        k = len(keep)
        for name in ("tri", "ccx", "ccy", "threshold"):
            arr = getattr(self, name)
            arr[:k] = arr[keep]
        self.alive[:k] = True
        self.alive[k : self.count] = False
        self.count = k
        self.dead = 0


def _dedupe(points: np.ndarray):
    seen: dict[tuple, int] = {}
    keep = []
    for i, p in enumerate(points):
        key = (float(p[0]), float(p[1]))
        if key not in seen:
            seen[key] = i
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def triangulate_indices(points2d: np.ndarray) -> np.ndarray:
    """Delaunay triangle index triples over the input points.

    Exact duplicate points are collapsed to their first occurrence;
    returned indices always refer to the original array.
    """
    pts_in = np.asarray(points2d, dtype=np.float64)
    if pts_in.ndim != 2 or pts_in.shape[1] != 2:
        raise TriangulationError(f"points must be Nx2, got {pts_in.shape}")
    keep = _dedupe(pts_in)
    pts = pts_in[keep]
    n = len(pts)
    if n < 3:
        raise TriangulationError(f"need at least 3 distinct points, got {n}")
    rel = pts - pts[0]
    if (np.abs(np.cross(rel, rel[np.argmax((rel**2).sum(1))])) == 0).all():
        raise TriangulationError("all points are collinear")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-12))
    m = _SUPER_SCALE * span
    verts = np.vstack(
        [
            pts,
            center + np.array([-2.0 * m, -m]),
            center + np.array([2.0 * m, -m]),
            center + np.array([0.0, 2.0 * m]),
        ]
    )
    store = _TriangleStore(capacity=max(4 * n, 64))
    store.add(np.array([[n, n + 1, n + 2]], dtype=np.int64), verts)

    for i in range(n):
        p = pts[i]
        bad = store.bad_for(p)
        if len(bad) == 0:
            # numerically outside every live circumcircle; skip rather than corrupt
            continue
        edge_count: dict[tuple[int, int], int] = {}
        for t in store.tri[bad]:
            a, b, c = int(t[0]), int(t[1]), int(t[2])
            for e in ((a, b), (b, c), (c, a)):
                key = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
                edge_count[key] = edge_count.get(key, 0) + 1
        store.kill(bad)
        boundary = [e for e, cnt in edge_count.items() if cnt == 1]
        new_tris = np.array([[a, b, i] for a, b in boundary], dtype=np.int64)
        store.add(new_tris, verts)
        if store.dead > 4096 and store.dead > store.count // 2:
            store.compact()

    tris = store.tri[: store.count][store.alive[: store.count]]
    tris = tris[(tris < n).all(axis=1)]
    if len(tris) == 0:
        raise TriangulationError("triangulation is empty")
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    tris = tris[area2 != 0.0]
    # orient consistently counter-clockwise
    flip = area2[area2 != 0.0] < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return keep[tris]


def delaunay_triangulate(points2d: np.ndarray, lifted_points: np.ndarray | None = None) -> TriMesh:
    """Triangulate a 2-D domain; vertices may carry lifted 3-D positions."""
    points2d = np.asarray(points2d, dtype=np.float64)
    tris = triangulate_indices(points2d)
    if lifted_points is None:
        vertices = np.column_stack([points2d, np.zeros(len(points2d))])
    else:
        vertices = np.asarray(lifted_points, dtype=np.float64)
        if len(vertices) != len(points2d):
            raise DataError("lifted points must align with the 2-D domain points")
    return TriMesh(vertices=vertices, triangles=tris)


def circumcircle_violations(points2d: np.ndarray, triangles: np.ndarray,
                            rtol: float = 1e-9) -> int:
    """Brute-force check: count triangles whose circumcircle strictly
    contains another input point (cocircular ties are tolerated)."""
    pts = np.asarray(points2d, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    ccx, ccy, r2, _ = _circumcircles(pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]])
    bad = 0
    for t in range(len(tris)):
        d2 = (pts[:, 0] - ccx[t]) ** 2 + (pts[:, 1] - ccy[t]) ** 2
        inside = d2 < r2[t] * (1.0 - rtol)
        inside[tris[t]] = False
        if inside.any():
            bad += 1
    return bad
