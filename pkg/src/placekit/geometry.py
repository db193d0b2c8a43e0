"""Geometric primitives: triangle meshes, yaw-oriented boxes, ray casting, overlap measures.

All quantities are meters in a Z-up right-handed world frame. Boxes rotate
about Z only, so every box is a vertical prism: 3D queries decompose into an
xy-polygon part and a z-interval part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Contact within this distance counts as intersection for mesh-mesh tests.
CONTACT_TOL = 1e-6
# Barycentric inclusion epsilon: rays grazing a triangle edge count as hits.
BARY_EPS = 1e-9
# Triangles below this area are scan slivers and are skipped.
DEGENERATE_AREA = 1e-12

_BVH_LEAF_SIZE = 8


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"non-finite vector: {a}")
    return a


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex RGB in [0, 1]."""

    vertices: np.ndarray  # (N, 3) float64
    triangles: np.ndarray  # (M, 3) int64
    colors: np.ndarray | None = None  # (N, 3) float64
    _bvh: "_Bvh | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("vertices must be (N, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValidationError("triangles must be (M, 3)")
        if len(self.triangles) < 1:
            raise ValidationError("mesh needs at least one triangle")
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("mesh vertices must be finite")
        if self.triangles.min(initial=0) < 0 or self.triangles.max(initial=-1) >= len(self.vertices):
            raise ValidationError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.vertices.shape:
                raise ValidationError("colors must match vertex count")
            if self.colors.min() < -1e-9 or self.colors.max() > 1 + 1e-9:
                raise ValidationError("colors must lie in [0, 1]")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def triangle_vertices(self) -> np.ndarray:
        """(M, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        t = self.triangle_vertices()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, rotation: np.ndarray | None = None, translation=None) -> "TriangleMesh":
        """Rigidly transformed copy (rotation applied before translation)."""
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + as_vec3(translation)
        return TriangleMesh(v, self.triangles.copy(), None if self.colors is None else self.colors.copy())

    def bvh(self) -> "_Bvh":
        if self._bvh is None:
            self._bvh = _Bvh(self.triangle_vertices())
        return self._bvh

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        if not meshes:
            raise ValidationError("cannot concatenate zero meshes")
        verts, tris, cols = [], [], []
        offset = 0
        has_colors = all(m.colors is not None for m in meshes)
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            if has_colors:
                cols.append(m.colors)
            offset += m.num_vertices
        return TriangleMesh(
            np.concatenate(verts),
            np.concatenate(tris),
            np.concatenate(cols) if has_colors else None,
        )


@dataclass(eq=False)
class Obb:
    """Box with strictly positive half extents, rotated about Z by ``yaw``."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.half_extents = as_vec3(self.half_extents)
        if np.any(self.half_extents <= 0):
            raise ValidationError(f"half extents must be positive: {self.half_extents}")
        if not math.isfinite(self.yaw):
            raise ValidationError("yaw must be finite")
        self.yaw = float(self.yaw) % (2.0 * math.pi)

    def footprint(self) -> np.ndarray:
        """(4, 2) xy corners, counter-clockwise."""
        hx, hy = self.half_extents[0], self.half_extents[1]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def z_interval(self) -> tuple[float, float]:
        hz = self.half_extents[2]
        return (self.center[2] - hz, self.center[2] + hz)

    def corners(self) -> np.ndarray:
        """(8, 3) corners: footprint corners at bottom then top."""
        fp = self.footprint()
        lo, hi = self.z_interval()
        bottom = np.column_stack([fp, np.full(4, lo)])
        top = np.column_stack([fp, np.full(4, hi)])
        return np.concatenate([bottom, top])

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    def footprint_area(self) -> float:
        return float(4.0 * self.half_extents[0] * self.half_extents[1])

    def contains_points(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(points) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.column_stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]])
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)

    def to_mesh(self) -> TriangleMesh:
        """Closed 12-triangle box mesh."""
        v = self.corners()
        # bottom corners 0-3 (ccw seen from above), top corners 4-7
        faces = np.array(
            [
                [0, 2, 1], [0, 3, 2],  # bottom (facing down)
                [4, 5, 6], [4, 6, 7],  # top
                [0, 1, 5], [0, 5, 4],
                [1, 2, 6], [1, 6, 5],
                [2, 3, 7], [2, 7, 6],
                [3, 0, 4], [3, 4, 7],
            ],
            dtype=np.int64,
        )
        return TriangleMesh(v, faces)


@dataclass(eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = as_vec3(self.origin)
        self.direction = as_vec3(self.direction)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValidationError(f"ray direction must be unit length, got |d|={n}")


@dataclass(eq=False)
class HitList:
    """Ray-mesh intersections sorted by ascending t (ties by triangle index)."""

    t: np.ndarray  # (K,)
    points: np.ndarray  # (K, 3)
    triangles: np.ndarray  # (K,)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1)
        if np.any(self.t < 0):
            raise ValidationError("hit parameters must be non-negative")
        if np.any(np.diff(self.t) < 0):
            raise ValidationError("hits must be sorted by t")

    def __len__(self) -> int:
        return len(self.t)

    @staticmethod
    def empty() -> "HitList":
        return HitList(np.empty(0), np.empty((0, 3)), np.empty(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# Interval and polygon overlap measures
# ---------------------------------------------------------------------------

def interval_iom(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Overlap length divided by the shorter interval's length.

    Degenerate intervals (length 0) count as contained when they lie inside
    the other interval, so containment of the smaller operand always gives 1.
    """
    a_lo, a_hi = float(a[0]), float(a[1])
    b_lo, b_hi = float(b[0]), float(b[1])
    if a_lo > a_hi or b_lo > b_hi:
        raise ValidationError("interval must satisfy lo <= hi")
    len_a, len_b = a_hi - a_lo, b_hi - b_lo
    if len_a == 0.0 and len_b == 0.0:
        return 1.0 if a_lo == b_lo else 0.0
    if len_a == 0.0:
        return 1.0 if b_lo <= a_lo <= b_hi else 0.0
    if len_b == 0.0:
        return 1.0 if a_lo <= b_lo <= a_hi else 0.0
    overlap = min(a_hi, b_hi) - max(a_lo, b_lo)
    return max(0.0, overlap) / min(len_a, len_b)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_clip(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` against convex CCW ``clip``."""
    poly = [np.asarray(v, dtype=np.float64) for v in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    m = len(clip)
    for i in range(m):
        if not poly:
            break
        a = clip[i]
        b = clip[(i + 1) % m]
        dx, dy = b[0] - a[0], b[1] - a[1]

        def side(p):
            return dx * (p[1] - a[1]) - dy * (p[0] - a[0])

        out = []
        n = len(poly)
        for j in range(n):
            p, q = poly[j], poly[(j + 1) % n]
            sp, sq = side(p), side(q)
            if sp >= 0.0:
                out.append(p)
                if sq < 0.0:
                    out.append(p + (q - p) * (sp / (sp - sq)))
            elif sq >= 0.0:
                out.append(p + (q - p) * (sp / (sp - sq)))
        poly = out
    return np.array(poly).reshape(-1, 2)


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def convex_polygon_iom(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection area over the smaller polygon's area (both convex CCW)."""
    area_a, area_b = polygon_area(a), polygon_area(b)
    smaller = min(area_a, area_b)
    if smaller <= 0.0:
        return 0.0
    inter = polygon_area(convex_clip(a, b))
    return float(min(1.0, max(0.0, inter / smaller)))


def footprint_iom(a: Obb, b: Obb) -> float:
    """Vertical intersection-over-minimum of the two xy footprints."""
    return convex_polygon_iom(a.footprint(), b.footprint())


# ---------------------------------------------------------------------------
# Convex polygon distances (xy plane)
# ---------------------------------------------------------------------------

def _segments(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return poly, np.roll(poly, -1, axis=0)


def convex_polygons_overlap(a: np.ndarray, b: np.ndarray, tol: float = 0.0) -> bool:
    """Separating-axis test; contact within ``tol`` counts as overlap."""
    for poly in (a, b):
        p0, p1 = _segments(poly)
        edges = p1 - p0
        axes = np.column_stack([-edges[:, 1], edges[:, 0]])
        norms = np.linalg.norm(axes, axis=1)
        axes = axes[norms > 1e-15] / norms[norms > 1e-15, None]
        pa = a @ axes.T
        pb = b @ axes.T
        gap = np.maximum(pb.min(axis=0) - pa.max(axis=0), pa.min(axis=0) - pb.max(axis=0))
        if np.any(gap > tol):
            return False
    return True


def _segment_distance_2d(p0, p1, q0, q1) -> float:
    """Min distance between two 2D segments."""

    def pt_seg(p, a, b):
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
        return float(np.linalg.norm(p - (a + t * ab)))

    d1 = (p1 - p0, q0 - p0, q1 - p0)
    c1 = d1[0][0] * d1[1][1] - d1[0][1] * d1[1][0]
    c2 = d1[0][0] * d1[2][1] - d1[0][1] * d1[2][0]
    d2 = (q1 - q0, p0 - q0, p1 - q0)
    c3 = d2[0][0] * d2[1][1] - d2[0][1] * d2[1][0]
    c4 = d2[0][0] * d2[2][1] - d2[0][1] * d2[2][0]
    if c1 * c2 < 0 and c3 * c4 < 0:
        return 0.0  # proper crossing
    return min(
        pt_seg(q0, p0, p1), pt_seg(q1, p0, p1), pt_seg(p0, q0, q1), pt_seg(p1, q0, q1)
    )


def convex_polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Min distance between two convex polygons; 0 if they overlap or touch."""
    if convex_polygons_overlap(a, b):
        return 0.0
    a0, a1 = _segments(a)
    b0, b1 = _segments(b)
    best = math.inf
    for i in range(len(a)):
        for j in range(len(b)):
            best = min(best, _segment_distance_2d(a0[i], a1[i], b0[j], b1[j]))
    return best


def points_to_convex_polygon_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each 2D point to a convex CCW polygon (0 inside).

    Vectorized over points.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p0, p1 = _segments(np.asarray(poly, dtype=np.float64))
    edges = p1 - p0  # (E, 2)
    # signed side: positive when the point is left of the edge (inside for CCW)
    rel = pts[:, None, :] - p0[None, :, :]  # (N, E, 2)
    side = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
    inside = np.all(side >= 0.0, axis=1)
    # distance to each edge segment
    denom = np.einsum("ij,ij->i", edges, edges)
    t = np.clip(np.einsum("nej,ej->ne", rel, edges) / denom[None, :], 0.0, 1.0)
    closest = p0[None, :, :] + t[:, :, None] * edges[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2).min(axis=1)
    d[inside] = 0.0
    return d


def minkowski_sum_convex(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Convex Minkowski sum via hull of pairwise vertex sums."""
    sums = (np.asarray(a)[:, None, :] + np.asarray(b)[None, :, :]).reshape(-1, 2)
    return convex_hull_2d(sums)


def interval_gap(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Gap between two 1D intervals, 0 if they overlap or touch."""
    return max(0.0, max(a[0], b[0]) - min(a[1], b[1]))


def obb_min_distance(a: Obb, b: Obb) -> float:
    """Min Euclidean distance between two solid yaw-oriented boxes.

    Yaw-only boxes are vertical prisms, so the distance decomposes exactly
    into a footprint-polygon term and a z-interval term.
    """
    dxy = convex_polygon_distance(a.footprint(), b.footprint())
    dz = interval_gap(a.z_interval(), b.z_interval())
    return math.hypot(dxy, dz)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def ray_triangles_t(origin: np.ndarray, direction: np.ndarray, tri: np.ndarray,
                    eps: float = BARY_EPS) -> np.ndarray:
    """Moller-Trumbore t parameters for one ray against (M, 3, 3) triangles.

    Misses are NaN. Edge-grazing hits (within ``eps`` in barycentric units)
    count. Degenerate triangles never hit.
    """
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(direction[None, :], e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = origin[None, :] - v0
    u = np.einsum("ij,ij->i", s, pvec) * inv
    qvec = np.cross(s, e1)
    v = np.einsum("j,ij->i", direction, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    good = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t >= -1e-12)
    out = np.where(good, np.maximum(t, 0.0), np.nan)
    return out


def rays_shared_origin_t(origin: np.ndarray, dirs: np.ndarray, tri: np.ndarray,
                         eps: float = BARY_EPS, chunk: int = 256) -> np.ndarray:
    """Moller-Trumbore for many rays from one origin: (R, T) t matrix, NaN misses.

    With a shared origin every per-triangle vector is precomputable, so each
    quantity reduces to one (R,3)x(3,T) matmul. Triangles are chunked to bound
    memory.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    out = np.empty((len(dirs), len(tri)))
    for s0 in range(0, len(tri), chunk):
        tc = tri[s0 : s0 + chunk]
        v0, v1, v2 = tc[:, 0], tc[:, 1], tc[:, 2]
        e1 = v1 - v0
        e2 = v2 - v0
        s = origin[None, :] - v0
        # det = e1.(d x e2) = d.(e2 x e1); u = s.(d x e2) = d.(e2 x s); v = d.(s x e1)
        det = dirs @ np.cross(e2, e1).T
        u_num = dirs @ np.cross(e2, s).T
        qvec = np.cross(s, e1)
        v_num = dirs @ qvec.T
        t_num = np.einsum("ij,ij->i", e2, qvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = u_num * inv
        v = v_num * inv
        t = t_num[None, :] * inv
        good = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t >= -1e-12)
        out[:, s0 : s0 + chunk] = np.where(good, np.maximum(t, 0.0), np.nan)
    return out


class _Bvh:
    """Static median-split BVH over triangles, used by raycast_all."""

    def __init__(self, tri_verts: np.ndarray):
        self.tri = np.asarray(tri_verts, dtype=np.float64)
        areas = 0.5 * np.linalg.norm(
            np.cross(self.tri[:, 1] - self.tri[:, 0], self.tri[:, 2] - self.tri[:, 0]), axis=1
        )
        self.alive = areas > DEGENERATE_AREA
        lo = self.tri.min(axis=1)
        hi = self.tri.max(axis=1)
        idx = np.flatnonzero(self.alive)
        self.order = idx  # permutation of surviving triangle indices
        self.nodes_lo: list[np.ndarray] = []
        self.nodes_hi: list[np.ndarray] = []
        self.nodes_child: list[tuple[int, int]] = []  # (left, right) or (-start, -count) leaf
        if len(idx) == 0:
            return
        cent = (lo + hi) * 0.5
        self._lo, self._hi, self._cent = lo, hi, cent
        buf = idx.copy()
        self.order = buf
        self._build(buf, 0, len(buf))

    def _push_node(self, lo, hi, child):
        self.nodes_lo.append(lo)
        self.nodes_hi.append(hi)
        self.nodes_child.append(child)
        return len(self.nodes_child) - 1

    def _build(self, buf, start, end) -> int:
        tris = buf[start:end]
        lo = self._lo[tris].min(axis=0)
        hi = self._hi[tris].max(axis=0)
        if end - start <= _BVH_LEAF_SIZE:
            return self._push_node(lo, hi, (-start - 1, end - start))
        cent = self._cent[tris]
        axis = int(np.argmax(hi - lo))
        order = np.argsort(cent[:, axis], kind="stable")
        buf[start:end] = tris[order]
        mid = start + (end - start) // 2
        node = self._push_node(lo, hi, (0, 0))
        left = self._build(buf, start, mid)
        right = self._build(buf, mid, end)
        self.nodes_child[node] = (left, right)
        return node

    def all_hits(self, origin: np.ndarray, direction: np.ndarray):
        """All (t, triangle index) intersections along a ray, unordered."""
        if not self.nodes_child:
            return np.empty(0), np.empty(0, dtype=np.int64)
        inv = np.where(direction != 0.0, 1.0 / np.where(direction == 0.0, 1.0, direction), np.inf)
        ts, ids = [], []
        stack = [0]
        while stack:
            node = stack.pop()
            lo, hi = self.nodes_lo[node], self.nodes_hi[node]
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            # zero-direction axes: inside iff origin within slab
            dz = direction == 0.0
            if np.any(dz & ((origin < lo - 1e-12) | (origin > hi + 1e-12))):
                continue
            tmin = np.where(dz, -np.inf, tmin)
            tmax = np.where(dz, np.inf, tmax)
            enter = max(tmin.max(), 0.0)
            exit_ = tmax.min()
            if enter > exit_ + 1e-12:
                continue
            left, right = self.nodes_child[node]
            if left < 0:
                start, count = -left - 1, right
                tris = self.order[start : start + count]
                t = ray_triangles_t(origin, direction, self.tri[tris])
                hit = ~np.isnan(t)
                ts.append(t[hit])
                ids.append(tris[hit])
            else:
                stack.append(left)
                stack.append(right)
        if not ts:
            return np.empty(0), np.empty(0, dtype=np.int64)
        return np.concatenate(ts), np.concatenate(ids)


def raycast_all(mesh: TriangleMesh, ray: Ray) -> HitList:
    """All ray-mesh intersections with t >= 0, sorted by (t, triangle index)."""
    t, ids = mesh.bvh().all_hits(ray.origin, ray.direction)
    if len(t) == 0:
        return HitList.empty()
    order = np.lexsort((ids, t))
    t, ids = t[order], ids[order]
    pts = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return HitList(t, pts, ids)


# ---------------------------------------------------------------------------
# Triangle-triangle intersection (vectorized over pairs)
# ---------------------------------------------------------------------------

def _segments_vs_triangles(p0, p1, tri) -> np.ndarray:
    """True where segment p0->p1 passes through triangle tri. Vectorized (P,)."""
    d = p1 - p0
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = p0 - v0
    u = np.einsum("ij,ij->i", s, pvec) * inv
    qvec = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    eps = BARY_EPS
    return ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t >= -eps) & (t <= 1 + eps)


def _points_to_triangles_distance(p, tri) -> np.ndarray:
    """Distance from points (P, 3) to triangles (P, 3) pairwise."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    nn = np.einsum("ij,ij->i", n, n)
    nn_safe = np.where(nn > 0, nn, 1.0)
    dist_plane = np.einsum("ij,ij->i", p - a, n) / np.sqrt(nn_safe)
    # barycentric coordinates of the in-plane projection
    proj = p - (dist_plane / np.sqrt(nn_safe))[:, None] * n
    v0 = b - a
    v1 = c - a
    v2 = proj - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    denom = d00 * d11 - d01 * d01
    denom_safe = np.where(np.abs(denom) > 1e-30, denom, 1.0)
    w1 = (d11 * d20 - d01 * d21) / denom_safe
    w2 = (d00 * d21 - d01 * d20) / denom_safe
    inside = (w1 >= 0) & (w2 >= 0) & (w1 + w2 <= 1) & (np.abs(denom) > 1e-30)

    def pt_seg(pp, s0, s1):
        ab = s1 - s0
        denom2 = np.einsum("ij,ij->i", ab, ab)
        tpar = np.clip(np.einsum("ij,ij->i", pp - s0, ab) / np.where(denom2 > 0, denom2, 1.0), 0, 1)
        return np.linalg.norm(pp - (s0 + tpar[:, None] * ab), axis=1)

    edge = np.minimum(np.minimum(pt_seg(p, a, b), pt_seg(p, b, c)), pt_seg(p, c, a))
    return np.where(inside, np.abs(dist_plane), edge)


def _segseg_distance_3d(p0, p1, q0, q1) -> np.ndarray:
    """Min distance between 3D segment pairs; vectorized over rows."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b
    s = np.where(np.abs(denom) > 1e-30, (b * f - c * e) / np.where(denom == 0, 1, denom), 0.0)
    s = np.clip(s, 0.0, 1.0)
    t = np.where(e > 1e-30, (b * s + f) / np.where(e == 0, 1, e), 0.0)
    t_cl = np.clip(t, 0.0, 1.0)
    # re-project s for clamped t
    s = np.where(e > 1e-30, np.clip((b * t_cl - c) / np.where(a == 0, 1, a), 0.0, 1.0), s)
    closest1 = p0 + s[:, None] * d1
    closest2 = q0 + t_cl[:, None] * d2
    return np.linalg.norm(closest1 - closest2, axis=1)


def tri_pairs_intersect(t1: np.ndarray, t2: np.ndarray, tol: float = CONTACT_TOL) -> np.ndarray:
    """True per pair when triangles cross or come within ``tol``. (P,3,3) inputs."""
    pierce = np.zeros(len(t1), dtype=bool)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        pierce |= _segments_vs_triangles(t1[:, i], t1[:, j], t2)
        pierce |= _segments_vs_triangles(t2[:, i], t2[:, j], t1)
    dist = np.full(len(t1), np.inf)
    for i in range(3):
        dist = np.minimum(dist, _points_to_triangles_distance(t1[:, i], t2))
        dist = np.minimum(dist, _points_to_triangles_distance(t2[:, i], t1))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        for k, l in ((0, 1), (1, 2), (2, 0)):
            dist = np.minimum(dist, _segseg_distance_3d(t1[:, i], t1[:, j], t2[:, k], t2[:, l]))
    return pierce | (dist <= tol)


def meshes_intersect(a: TriangleMesh, b: TriangleMesh, tol: float = CONTACT_TOL) -> bool:
    """True iff any triangle of ``a`` intersects any triangle of ``b``.

    Shared-boundary contact within ``tol`` counts. Degenerate triangles are
    skipped. Candidate pairs are prefiltered by axis-aligned bounds.
    """
    ta = a.triangle_vertices()
    tb = b.triangle_vertices()
    area_a = 0.5 * np.linalg.norm(np.cross(ta[:, 1] - ta[:, 0], ta[:, 2] - ta[:, 0]), axis=1)
    area_b = 0.5 * np.linalg.norm(np.cross(tb[:, 1] - tb[:, 0], tb[:, 2] - tb[:, 0]), axis=1)
    ta = ta[area_a > DEGENERATE_AREA]
    tb = tb[area_b > DEGENERATE_AREA]
    if len(ta) == 0 or len(tb) == 0:
        return False
    lo_a, hi_a = ta.min(axis=1), ta.max(axis=1)
    lo_b, hi_b = tb.min(axis=1), tb.max(axis=1)
    # cull against the other mesh's overall bounds first
    keep_a = np.all(hi_a >= lo_b.min(axis=0) - tol, axis=1) & np.all(lo_a <= hi_b.max(axis=0) + tol, axis=1)
    keep_b = np.all(hi_b >= lo_a.min(axis=0) - tol, axis=1) & np.all(lo_b <= hi_a.max(axis=0) + tol, axis=1)
    ta, lo_a, hi_a = ta[keep_a], lo_a[keep_a], hi_a[keep_a]
    tb, lo_b, hi_b = tb[keep_b], lo_b[keep_b], hi_b[keep_b]
    if len(ta) == 0 or len(tb) == 0:
        return False
    # pairwise AABB overlap
    overlap = np.all(
        (lo_a[:, None, :] <= hi_b[None, :, :] + tol) & (hi_a[:, None, :] >= lo_b[None, :, :] - tol),
        axis=2,
    )
    ia, ib = np.nonzero(overlap)
    if len(ia) == 0:
        return False
    chunk = 4096
    for s in range(0, len(ia), chunk):
        sel = slice(s, s + chunk)
        if np.any(tri_pairs_intersect(ta[ia[sel]], tb[ib[sel]], tol)):
            return True
    return False
