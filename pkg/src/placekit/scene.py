"""Scene and asset data model: ingestion, posing, point sampling.

A scene is a triangle mesh plus a colored point cloud plus labeled anchor
boxes. An asset lives in a canonical frame: AABB centered at the origin,
up = +Z, frontal = +Y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ply
from .errors import ValidationError
from .geometry import Obb, TriangleMesh, as_vec3, rot_z

DEFAULT_POINT_DENSITY = 150.0  # points per square meter when sampling is needed

_AXES = {
    "+x": np.array([1.0, 0, 0]), "-x": np.array([-1.0, 0, 0]),
    "+y": np.array([0, 1.0, 0]), "-y": np.array([0, -1.0, 0]),
    "+z": np.array([0, 0, 1.0]), "-z": np.array([0, 0, -1.0]),
}


@dataclass(eq=False)
class Anchor:
    instance_id: int
    class_label: str
    obb: Obb

    def __post_init__(self):
        if not self.class_label:
            raise ValidationError("anchor class label must be non-empty")


@dataclass(eq=False)
class SceneModel:
    mesh: TriangleMesh
    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]
    anchors: list[Anchor]
    scene_id: str

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if len(self.points) < 1:
            raise ValidationError("scene needs at least one point")
        if self.colors.shape != self.points.shape:
            raise ValidationError("colors must be (N, 3) matching points")
        if self.colors.min() < -1e-9 or self.colors.max() > 1 + 1e-9:
            raise ValidationError("point colors must lie in [0, 1]")
        ids = [a.instance_id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValidationError("anchor instance ids must be unique")

    @property
    def num_points(self) -> int:
        return len(self.points)

    def room_size(self) -> float:
        """Max horizontal extent of the scene, used for the 'near' threshold."""
        lo, hi = self.mesh.aabb()
        return float(max(hi[0] - lo[0], hi[1] - lo[1]))

    def anchors_of_class(self, class_label: str) -> list[Anchor]:
        return [a for a in self.anchors if a.class_label == class_label]

    def anchor_by_id(self, instance_id: int) -> Anchor:
        for a in self.anchors:
            if a.instance_id == instance_id:
                return a
        raise ValidationError(f"no anchor with id {instance_id}")

    def anchor_classes(self) -> list[str]:
        seen = []
        for a in self.anchors:
            if a.class_label not in seen:
                seen.append(a.class_label)
        return seen


@dataclass(eq=False)
class Asset:
    """Canonical-frame asset: AABB centered at origin, up +Z, frontal +Y."""

    mesh: TriangleMesh
    extents: np.ndarray
    asset_id: str

    def __post_init__(self):
        self.extents = as_vec3(self.extents)
        if np.any(self.extents <= 0):
            raise ValidationError("asset extents must be positive")
        lo, hi = self.mesh.aabb()
        sizes = hi - lo
        if np.max(np.abs(sizes - self.extents)) > 1e-6:
            raise ValidationError(
                f"asset extents {self.extents} do not match mesh AABB sizes {sizes}")
        if np.max(np.abs((hi + lo) * 0.5)) > 1e-6:
            raise ValidationError("asset mesh AABB must be centered at the origin")

    @property
    def height(self) -> float:
        return float(self.extents[2])


@dataclass(eq=False)
class Placement:
    """Asset-center translation plus yaw about +Z (benchmark frame)."""

    t: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.t = as_vec3(self.t)
        if not math.isfinite(self.yaw):
            raise ValidationError("yaw must be finite")
        self.yaw = float(self.yaw) % (2.0 * math.pi)


def pose_asset(asset: Asset, p: Placement) -> tuple[TriangleMesh, Obb]:
    """World-frame mesh and box for the asset under a placement."""
    mesh = asset.mesh.transformed(rot_z(p.yaw), p.t)
    obb = Obb(p.t.copy(), asset.extents * 0.5, p.yaw)
    return mesh, obb


def posed_obb(asset: Asset, p: Placement) -> Obb:
    return Obb(p.t.copy(), asset.extents * 0.5, p.yaw)


# ---------------------------------------------------------------------------
# Point sampling
# ---------------------------------------------------------------------------

def sample_point_cloud(mesh: TriangleMesh, density: float, seed: int = 0):
    """Area-weighted uniform surface samples with interpolated colors.

    Returns (positions (N,3), colors (N,3)). Deterministic per seed.
    """
    if density <= 0:
        raise ValidationError("sampling density must be positive")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    count = int(round(total * density))
    if count <= 0:
        count = 1
    rng = np.random.default_rng(seed)
    probs = areas / total
    tri_idx = rng.choice(len(areas), size=count, p=probs)
    u = rng.uniform(size=count)
    v = rng.uniform(size=count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    w = 1.0 - u - v
    tv = mesh.triangle_vertices()[tri_idx]
    pos = w[:, None] * tv[:, 0] + u[:, None] * tv[:, 1] + v[:, None] * tv[:, 2]
    if mesh.colors is not None:
        tc = mesh.colors[mesh.triangles][tri_idx]
        col = w[:, None] * tc[:, 0] + u[:, None] * tc[:, 1] + v[:, None] * tc[:, 2]
        col = np.clip(col, 0.0, 1.0)
    else:
        col = np.full((count, 3), 0.5)
    return pos, col


# ---------------------------------------------------------------------------
# Ingestion and export
# ---------------------------------------------------------------------------

def _anchor_from_json(entry: dict) -> Anchor:
    half = np.asarray(entry["half_extents"], dtype=np.float64)
    if np.any(half <= 0):
        raise ValidationError(f"anchor {entry.get('id')} has non-positive half extents")
    if not np.all(np.isfinite(np.asarray(entry["center"], dtype=np.float64))):
        raise ValidationError(f"anchor {entry.get('id')} has non-finite center")
    return Anchor(
        instance_id=int(entry["id"]),
        class_label=str(entry["class"]),
        obb=Obb(np.asarray(entry["center"], dtype=np.float64), half, float(entry.get("yaw", 0.0))),
    )


def _anchor_to_json(anchor: Anchor) -> dict:
    return {
        "id": anchor.instance_id,
        "class": anchor.class_label,
        "center": [float(x) for x in anchor.obb.center],
        "half_extents": [float(x) for x in anchor.obb.half_extents],
        "yaw": float(anchor.obb.yaw),
    }


def ingest_scene(mesh_source, annotation_source, *, density: float = DEFAULT_POINT_DENSITY,
                 seed: int = 0) -> SceneModel:
    """Build a SceneModel from a PLY mesh and a JSON annotation file/dict.

    Points come from the annotation's ``points_file`` when present, otherwise
    they are sampled from the mesh at ``density``.
    """
    base_dir = None
    if isinstance(annotation_source, (str, Path)):
        base_dir = Path(annotation_source).parent
        with open(annotation_source) as f:
            ann = json.load(f)
    else:
        ann = annotation_source
    mesh = ply.read_mesh(mesh_source)
    anchors = [_anchor_from_json(e) for e in ann.get("anchors", [])]
    points_file = ann.get("points_file")
    if points_file:
        path = Path(points_file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        pos, col = ply.read_points(path)
        if col is None:
            col = np.full((len(pos), 3), 0.5)
    else:
        pos, col = sample_point_cloud(mesh, density, seed=seed)
    return SceneModel(mesh=mesh, points=pos, colors=col, anchors=anchors,
                      scene_id=str(ann.get("scene_id", "scene")))


def export_scene(scene: SceneModel, out_dir, *, ascii_format: bool = False) -> Path:
    """Write mesh, points, and annotations; returns the annotation path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / f"{scene.scene_id}.ply"
    points_path = out / f"{scene.scene_id}_points.ply"
    ann_path = out / f"{scene.scene_id}.json"
    ply.write_mesh(mesh_path, scene.mesh, ascii_format=ascii_format)
    ply.write_points(points_path, scene.points, scene.colors)
    ann = {
        "scene_id": scene.scene_id,
        "anchors": [_anchor_to_json(a) for a in scene.anchors],
        "points_file": points_path.name,
    }
    with open(ann_path, "w") as f:
        json.dump(ann, f, indent=2, sort_keys=True)
        f.write("\n")
    return ann_path


def load_asset(mesh_source, sidecar_source) -> Asset:
    """Load an asset PLY plus its JSON sidecar, re-axing into the canonical frame."""
    if isinstance(sidecar_source, (str, Path)):
        with open(sidecar_source) as f:
            meta = json.load(f)
    else:
        meta = sidecar_source
    up = _AXES.get(meta.get("up", "+z"))
    frontal = _AXES.get(meta.get("frontal", "+y"))
    if up is None or frontal is None:
        raise ValidationError(f"unknown axis spec: up={meta.get('up')} frontal={meta.get('frontal')}")
    if abs(float(up @ frontal)) > 1e-9:
        raise ValidationError("up and frontal axes must be orthogonal")
    mesh = ply.read_mesh(mesh_source)
    right = np.cross(frontal, up)
    # rows map declared axes onto canonical +X/+Y/+Z
    rot = np.stack([right, frontal, up])
    v = mesh.vertices @ rot.T
    lo, hi = v.min(axis=0), v.max(axis=0)
    v = v - (lo + hi) * 0.5
    canonical = TriangleMesh(v, mesh.triangles.copy(),
                             None if mesh.colors is None else mesh.colors.copy())
    extents = np.asarray(meta["extents"], dtype=np.float64)
    return Asset(mesh=canonical, extents=extents, asset_id=str(meta["asset_id"]))


def save_asset(asset: Asset, out_dir) -> Path:
    """Write asset PLY plus sidecar; returns the sidecar path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / f"{asset.asset_id}.ply"
    meta_path = out / f"{asset.asset_id}.json"
    ply.write_mesh(mesh_path, asset.mesh)
    meta = {
        "asset_id": asset.asset_id,
        "up": "+z",
        "frontal": "+y",
        "extents": [float(x) for x in asset.extents],
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return meta_path
