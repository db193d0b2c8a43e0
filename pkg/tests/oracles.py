"""Independent brute-force oracles shared by the test suite.

Everything here deliberately avoids the library's fast paths: plain per-item
loops, linear solves instead of cross-product kernels, sampling instead of
clipping. Slow but trustworthy.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from placekit.geometry import Obb, TriangleMesh, rot_z


def obb_surface_points(obb: Obb, pitch: float) -> np.ndarray:
    """Stratified grid over all six faces, edges included."""
    h = obb.half_extents
    faces = []
    for axis in range(3):
        u, v = [i for i in range(3) if i != axis]
        nu = max(2, int(math.ceil(2 * h[u] / pitch)) + 1)
        nv = max(2, int(math.ceil(2 * h[v] / pitch)) + 1)
        uu, vv = np.meshgrid(np.linspace(-h[u], h[u], nu), np.linspace(-h[v], h[v], nv), indexing="ij")
        for sign in (-1.0, 1.0):
            p = np.zeros((uu.size, 3))
            p[:, u] = uu.ravel()
            p[:, v] = vv.ravel()
            p[:, axis] = sign * h[axis]
            faces.append(p)
    local = np.concatenate(faces)
    return local @ rot_z(obb.yaw).T + obb.center


def mc_obb_distance(a: Obb, b: Obb, pitch: float = 1.2e-3) -> float:
    """Min distance between sampled surface point sets (upper bound on truth)."""
    pa = obb_surface_points(a, pitch)
    pb = obb_surface_points(b, pitch)
    d, _ = cKDTree(pb).query(pa, k=1)
    return float(d.min())


def mc_footprint_iom(a: Obb, b: Obb, n: int, rng: np.random.Generator) -> float:
    """Rejection-sampling estimate of footprint intersection over minimum."""
    area_a = 4 * a.half_extents[0] * a.half_extents[1]
    area_b = 4 * b.half_extents[0] * b.half_extents[1]
    small, other = (a, b) if area_a <= area_b else (b, a)
    u = rng.uniform(-1, 1, size=(n, 2)) * small.half_extents[:2]
    c, s = math.cos(small.yaw), math.sin(small.yaw)
    world = np.column_stack([c * u[:, 0] - s * u[:, 1], s * u[:, 0] + c * u[:, 1]]) + small.center[:2]
    rel = world - other.center[:2]
    c2, s2 = math.cos(other.yaw), math.sin(other.yaw)
    local = np.column_stack([c2 * rel[:, 0] + s2 * rel[:, 1], -s2 * rel[:, 0] + c2 * rel[:, 1]])
    inside = np.all(np.abs(local) <= other.half_extents[:2], axis=1)
    return float(inside.mean())


def brute_raycast(mesh: TriangleMesh, origin, direction, eps: float = 1e-9):
    """All (t, triangle) hits via per-triangle linear solves. Returns sorted arrays."""
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    hits = []
    tv = mesh.triangle_vertices()
    for i, (v0, v1, v2) in enumerate(tv):
        area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0))
        if area <= 1e-12:
            continue
        m = np.column_stack([v1 - v0, v2 - v0, -direction])
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        u, v, t = np.linalg.solve(m, origin - v0)
        if u >= -eps and v >= -eps and u + v <= 1 + eps and t >= -1e-12:
            hits.append((max(t, 0.0), i))
    hits.sort()
    if not hits:
        return np.empty(0), np.empty(0, dtype=np.int64)
    t = np.array([h[0] for h in hits])
    ids = np.array([h[1] for h in hits], dtype=np.int64)
    return t, ids


def _project(points, axis):
    d = points @ axis
    return d.min(), d.max()


def sat_triangles_separated(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Separating-axis test for one triangle pair (strict separation)."""
    axes = []
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    for n in (n1, n2):
        if np.linalg.norm(n) > 1e-14:
            axes.append(n / np.linalg.norm(n))
    for i in range(3):
        e1 = t1[(i + 1) % 3] - t1[i]
        for j in range(3):
            e2 = t2[(j + 1) % 3] - t2[j]
            cr = np.cross(e1, e2)
            nrm = np.linalg.norm(cr)
            if nrm > 1e-14:
                axes.append(cr / nrm)
    for axis in axes:
        lo1, hi1 = _project(t1, axis)
        lo2, hi2 = _project(t2, axis)
        if lo1 > hi2 + 1e-12 or lo2 > hi1 + 1e-12:
            return True
    return False


def brute_meshes_intersect(a: TriangleMesh, b: TriangleMesh) -> bool:
    """All-pairs SAT without any prefiltering."""
    ta = a.triangle_vertices()
    tb = b.triangle_vertices()
    for t1 in ta:
        if 0.5 * np.linalg.norm(np.cross(t1[1] - t1[0], t1[2] - t1[0])) <= 1e-12:
            continue
        for t2 in tb:
            if 0.5 * np.linalg.norm(np.cross(t2[1] - t2[0], t2[2] - t2[0])) <= 1e-12:
                continue
            if not sat_triangles_separated(t1, t2):
                return True
    return False
