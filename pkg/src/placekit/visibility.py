"""Anchor-camera visibility via per-pixel first-hit ray casting.

Benchmark mode renders the true posed asset mesh at high resolution; dataset
mode renders the asset's bounding cuboid at low resolution with a fixed
rotation. Both reduce to: does any pixel's first hit belong to the asset?
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import DEGENERATE_AREA, TriangleMesh, as_vec3, rays_shared_origin_t
from .scene import Anchor, SceneModel

log = logging.getLogger(__name__)

_RAY_CHUNK = 1 << 17  # pixels per batch in the asset pass
_OCC_CHUNK = 128  # occluder triangles per batch


@dataclass(eq=False)
class AnchorCamera:
    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    fov_deg: float
    resolution: int

    def __post_init__(self):
        self.position = as_vec3(self.position)
        self.forward = as_vec3(self.forward)
        self.up = as_vec3(self.up)
        if abs(np.linalg.norm(self.forward) - 1.0) > 1e-9:
            raise ValidationError("camera forward must be unit length")
        if abs(np.linalg.norm(self.up) - 1.0) > 1e-9:
            raise ValidationError("camera up must be unit length")
        if abs(float(self.forward @ self.up)) > 1e-9:
            raise ValidationError("camera forward and up must be orthogonal")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValidationError("fov must lie in (0, 180) degrees")
        if self.resolution < 1:
            raise ValidationError("resolution must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        right = np.cross(self.forward, self.up)
        return right / np.linalg.norm(right), self.up


def build_anchor_camera(scene: SceneModel, anchor: Anchor, target,
                        fov_deg: float = 60.0, resolution: int = 256) -> AnchorCamera:
    """Camera at the anchor vertex nearest the anchor's vertex centroid.

    Falls back to the box center when the anchor box contains no scene-mesh
    vertices (synthetic boxes have no interior vertices of their own).
    """
    target = as_vec3(target)
    inside = anchor.obb.contains_points(scene.mesh.vertices)
    if np.any(inside):
        pts = scene.mesh.vertices[inside]
        centroid = pts.mean(axis=0)
        position = pts[int(np.argmin(np.linalg.norm(pts - centroid, axis=1)))].copy()
    else:
        log.debug("anchor %s has no scene vertices in its box; using box center",
                  anchor.instance_id)
        position = anchor.obb.center.copy()
    forward = target - position
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValidationError("camera target coincides with camera position")
    forward = forward / n
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 0.999:
        up_hint = np.array([1.0, 0.0, 0.0])
    up = up_hint - (up_hint @ forward) * forward
    up = up / np.linalg.norm(up)
    return AnchorCamera(position, forward, up, fov_deg, resolution)


def _pixel_dirs(camera: AnchorCamera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Unit directions through pixel centers."""
    right, up = camera.basis()
    half = math.tan(math.radians(camera.fov_deg) / 2.0)
    r = camera.resolution
    sx = (2.0 * (px + 0.5) / r - 1.0) * half
    sy = (1.0 - 2.0 * (py + 0.5) / r) * half
    d = camera.forward[None, :] + sx[:, None] * right[None, :] + sy[:, None] * up[None, :]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _clean_triangles(mesh: TriangleMesh) -> np.ndarray:
    tv = mesh.triangle_vertices()
    areas = 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)
    return tv[areas > DEGENERATE_AREA]


def _projected_pixel_window(camera: AnchorCamera, mesh: TriangleMesh):
    """Conservative pixel bbox covering the mesh; full image when any vertex
    sits behind the camera plane; None when fully outside the frustum."""
    r = camera.resolution
    right, up = camera.basis()
    rel = mesh.vertices - camera.position
    depth = rel @ camera.forward
    if np.any(depth <= 1e-9):
        return 0, r - 1, 0, r - 1
    half = math.tan(math.radians(camera.fov_deg) / 2.0)
    sx = (rel @ right) / depth / half
    sy = (rel @ up) / depth / half
    px = (sx + 1.0) * 0.5 * r - 0.5
    py = (1.0 - sy) * 0.5 * r - 0.5
    x0 = max(0, int(math.floor(px.min())) - 1)
    x1 = min(r - 1, int(math.ceil(px.max())) + 1)
    y0 = max(0, int(math.floor(py.min())) - 1)
    y1 = min(r - 1, int(math.ceil(py.max())) + 1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, x1, y0, y1


def _occluder_candidates(scene_tris: np.ndarray, camera_pos: np.ndarray,
                         asset_mesh: TriangleMesh) -> np.ndarray:
    """Triangles whose AABB meets the camera-to-asset bounding box; nothing
    outside that box can lie between the camera and the asset."""
    lo_a, hi_a = asset_mesh.aabb()
    lo = np.minimum(lo_a, camera_pos) - 1e-9
    hi = np.maximum(hi_a, camera_pos) + 1e-9
    keep = np.all((scene_tris.max(axis=1) >= lo) & (scene_tris.min(axis=1) <= hi), axis=1)
    return scene_tris[keep]


def _asset_pixel_chunks(scene, asset_mesh: TriangleMesh, camera: AnchorCamera):
    """Yield (px, py) arrays of pixels whose first hit is the asset, chunkwise."""
    scene_mesh = scene.mesh if isinstance(scene, SceneModel) else scene
    asset_tris = _clean_triangles(asset_mesh)
    if len(asset_tris) == 0:
        return
    window = _projected_pixel_window(camera, asset_mesh)
    if window is None:
        return
    x0, x1, y0, y1 = window
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1), indexing="xy")
    px, py = gx.ravel(), gy.ravel()
    scene_tris = _occluder_candidates(_clean_triangles(scene_mesh), camera.position, asset_mesh)
    for s0 in range(0, len(px), _RAY_CHUNK):
        cpx, cpy = px[s0 : s0 + _RAY_CHUNK], py[s0 : s0 + _RAY_CHUNK]
        dirs = _pixel_dirs(camera, cpx, cpy)
        t_asset = rays_shared_origin_t(camera.position, dirs, asset_tris)
        t_first = np.min(np.where(np.isnan(t_asset), np.inf, t_asset), axis=1)
        alive = np.flatnonzero(np.isfinite(t_first) & (t_first > 1e-9))
        if len(alive) == 0:
            continue
        t_ref = t_first[alive]
        cand_dirs = dirs[alive]
        for c0 in range(0, len(scene_tris), _OCC_CHUNK):
            t_s = rays_shared_origin_t(camera.position, cand_dirs, scene_tris[c0 : c0 + _OCC_CHUNK])
            with np.errstate(invalid="ignore"):
                blocked = np.any((t_s > 1e-9) & (t_s < t_ref[:, None] - 1e-9), axis=1)
            if np.any(blocked):
                keep = ~blocked
                alive, t_ref, cand_dirs = alive[keep], t_ref[keep], cand_dirs[keep]
                if len(alive) == 0:
                    break
        if len(alive) > 0:
            yield cpx[alive], cpy[alive]


def visibility_test(scene, asset_mesh: TriangleMesh, camera: AnchorCamera) -> bool:
    """True iff any pixel's first hit belongs to the asset geometry."""
    for _px, _py in _asset_pixel_chunks(scene, asset_mesh, camera):
        return True
    return False


def asset_pixel_mask(scene, asset_mesh: TriangleMesh, camera: AnchorCamera) -> np.ndarray:
    """Boolean (res, res) image of pixels whose first hit is the asset."""
    mask = np.zeros((camera.resolution, camera.resolution), dtype=bool)
    for px, py in _asset_pixel_chunks(scene, asset_mesh, camera):
        mask[py, px] = True
    return mask


def write_debug_mask(path, mask: np.ndarray) -> None:
    """Dump a boolean pixel mask as a PGM image."""
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())
