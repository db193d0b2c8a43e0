"""Procedural synthetic scenes: cuboid rooms with openings and furniture.

Stand-in for real scans so every anchor box is exact and every test can be
checked against closed-form geometry. Deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import GenerationError, ValidationError
from .geometry import Obb, TriangleMesh, convex_polygons_overlap, vec3
from .scene import Anchor, SceneModel, sample_point_cloud

# uchar palette so colors survive PLY round-trips exactly
_PALETTE = {
    "floor": (160, 160, 160),
    "wall": (205, 205, 205),
    "ceiling": (235, 235, 235),
    "table": (150, 100, 60),
    "chair": (60, 100, 150),
    "desk": (120, 80, 50),
    "bed": (170, 60, 60),
    "sofa": (60, 150, 90),
    "tv": (30, 30, 30),
    "shelf": (110, 70, 140),
}

_MAX_PLACE_TRIES = 500


def _class_color(label: str) -> np.ndarray:
    if label in _PALETTE:
        rgb = _PALETTE[label]
    else:
        h = abs(hash(label))
        rgb = (64 + h % 128, 64 + (h // 128) % 128, 64 + (h // 16384) % 128)
    return np.array(rgb, dtype=np.float64) / 255.0


@dataclass
class Opening:
    """Rectangular hole in a wall; also becomes a door/window anchor."""

    wall: str  # 'n' | 's' | 'e' | 'w'
    kind: str  # 'door' | 'window'
    offset: float  # hole center along the wall, meters from the wall's low corner
    width: float
    z0: float
    z1: float


@dataclass
class FurnitureItem:
    class_label: str
    size: tuple[float, float, float]  # x, y, z sizes at yaw 0
    position: tuple[float, float] | None = None  # center xy; None = random
    yaw: float | str | None = None  # radians, "random", or None (= 0)
    on_top_of: int | None = None  # index of the supporting item
    base_z: float | None = None  # bottom height override (wall-mounted items)
    annotation_only: bool = False  # anchor box without mesh geometry


@dataclass
class SynthSceneSpec:
    scene_id: str = "synth"
    room: tuple[float, float] = (4.0, 4.0)
    wall_height: float = 2.5
    wall_thickness: float = 0.05
    floor_thickness: float = 0.05
    ceiling: bool = False
    openings: list[Opening] = field(default_factory=list)
    furniture: list[FurnitureItem] = field(default_factory=list)
    seed: int = 0
    point_density: float = 150.0
    min_gap: float = 0.05  # clearance enforced between randomly placed items

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(data: dict) -> "SynthSceneSpec":
        d = dict(data)
        d["openings"] = [Opening(**o) for o in d.get("openings", [])]
        d["furniture"] = [FurnitureItem(**_tupled(f)) for f in d.get("furniture", [])]
        d["room"] = tuple(d.get("room", (4.0, 4.0)))
        return SynthSceneSpec(**d)


def _tupled(f: dict) -> dict:
    f = dict(f)
    f["size"] = tuple(f["size"])
    if f.get("position") is not None:
        f["position"] = tuple(f["position"])
    return f


def _colored_box(obb: Obb, color: np.ndarray) -> TriangleMesh:
    m = obb.to_mesh()
    return TriangleMesh(m.vertices, m.triangles, np.tile(color, (m.num_vertices, 1)))


def _wall_boxes(lo, hi, openings: list[tuple[float, float, float, float]]):
    """Split an axis-aligned wall box by rectangular holes.

    ``openings`` rows are (a0, a1, z0, z1) along the wall's long axis. Returns
    a list of (lo, hi) box corner pairs.
    """
    axis = 0 if (hi[0] - lo[0]) >= (hi[1] - lo[1]) else 1
    boxes = []
    cuts = sorted(openings)
    cursor = lo[axis]
    for a0, a1, z0, z1 in cuts:
        if a0 > cursor:
            b_lo, b_hi = lo.copy(), hi.copy()
            b_lo[axis], b_hi[axis] = cursor, a0
            boxes.append((b_lo, b_hi))
        seg_lo, seg_hi = lo.copy(), hi.copy()
        seg_lo[axis], seg_hi[axis] = a0, a1
        if z0 > lo[2]:
            b_lo, b_hi = seg_lo.copy(), seg_hi.copy()
            b_hi[2] = z0
            boxes.append((b_lo, b_hi))
        if z1 < hi[2]:
            b_lo, b_hi = seg_lo.copy(), seg_hi.copy()
            b_lo[2] = z1
            boxes.append((b_lo, b_hi))
        cursor = a1
    if cursor < hi[axis]:
        b_lo, b_hi = lo.copy(), hi.copy()
        b_lo[axis] = cursor
        boxes.append((b_lo, b_hi))
    return boxes


def _aabb_obb(lo, hi) -> Obb:
    return Obb((lo + hi) * 0.5, (hi - lo) * 0.5, 0.0)


def generate_synthetic_scene(spec: SynthSceneSpec) -> SceneModel:
    """Room mesh (floor, walls with openings, furniture) with exact anchors."""
    lx, ly = spec.room
    t = spec.wall_thickness
    h = spec.wall_height
    if lx <= 4 * t or ly <= 4 * t:
        raise GenerationError("room too small for its walls")
    rng = np.random.default_rng(spec.seed)
    parts: list[TriangleMesh] = []
    anchors: list[Anchor] = []
    next_id = 0

    floor = _aabb_obb(np.array([0.0, 0.0, -spec.floor_thickness]), np.array([lx, ly, 0.0]))
    parts.append(_colored_box(floor, _class_color("floor")))
    if spec.ceiling:
        ceil = _aabb_obb(np.array([0.0, 0.0, h]), np.array([lx, ly, h + spec.floor_thickness]))
        parts.append(_colored_box(ceil, _class_color("ceiling")))

    wall_bounds = {
        "s": (np.array([t, 0.0, 0.0]), np.array([lx - t, t, h])),
        "n": (np.array([t, ly - t, 0.0]), np.array([lx - t, ly, h])),
        "w": (np.array([0.0, 0.0, 0.0]), np.array([t, ly, h])),
        "e": (np.array([lx - t, 0.0, 0.0]), np.array([lx, ly, h])),
    }
    wall_color = _class_color("wall")
    for wall_key, (lo, hi) in wall_bounds.items():
        holes = []
        for op in spec.openings:
            if op.wall != wall_key:
                continue
            axis = 0 if wall_key in ("s", "n") else 1
            a0 = lo[axis] + op.offset - op.width / 2
            a1 = lo[axis] + op.offset + op.width / 2
            if a0 < lo[axis] - 1e-9 or a1 > hi[axis] + 1e-9 or op.z0 < -1e-9 or op.z1 > h + 1e-9:
                raise GenerationError(f"opening does not fit its wall: {op}")
            holes.append((a0, a1, max(op.z0, 0.0), min(op.z1, h)))
            center = lo.copy()
            center[axis] = (a0 + a1) / 2
            center[1 - axis] = (lo[1 - axis] + hi[1 - axis]) / 2
            center[2] = (op.z0 + op.z1) / 2
            half = np.empty(3)
            half[axis] = op.width / 2
            half[1 - axis] = (hi[1 - axis] - lo[1 - axis]) / 2
            half[2] = (op.z1 - op.z0) / 2
            anchors.append(Anchor(next_id, op.kind, Obb(center, half, 0.0)))
            next_id += 1
        for b_lo, b_hi in _wall_boxes(lo, hi, holes):
            parts.append(_colored_box(_aabb_obb(b_lo, b_hi), wall_color))

    interior = (t, t, lx - t, ly - t)
    placed: list[tuple[Obb, int | None]] = []  # (obb, parent index)
    for idx, item in enumerate(spec.furniture):
        sx, sy, sz = item.size
        if item.on_top_of is not None:
            if not 0 <= item.on_top_of < idx:
                raise GenerationError(f"furniture {idx} stacks on undefined item {item.on_top_of}")
            parent = placed[item.on_top_of][0]
            base_z = parent.z_interval()[1]
        else:
            parent = None
            base_z = 0.0
        if item.base_z is not None:
            base_z = item.base_z
        obb = _place_item(item, idx, parent, base_z, interior, placed, spec, rng)
        placed.append((obb, item.on_top_of))
        if not item.annotation_only:
            parts.append(_colored_box(obb, _class_color(item.class_label)))
        anchors.append(Anchor(next_id, item.class_label, obb))
        next_id += 1

    mesh = TriangleMesh.concatenate(parts)
    pos, col = sample_point_cloud(mesh, spec.point_density, seed=spec.seed)
    return SceneModel(mesh=mesh, points=pos, colors=col, anchors=anchors, scene_id=spec.scene_id)


def _item_yaw(item: FurnitureItem, rng) -> float:
    if item.yaw == "random":
        return float(rng.uniform(0.0, 2 * math.pi))
    if item.yaw is None:
        return 0.0
    return float(item.yaw)


def _footprint_clear(obb: Obb, others: list[tuple[Obb, int | None]], parent_idx, gap: float) -> bool:
    fp = obb.footprint()
    z = obb.z_interval()
    for i, (other, _) in enumerate(others):
        if parent_idx is not None and i == parent_idx:
            continue
        oz = other.z_interval()
        if z[0] >= oz[1] - 1e-9 or z[1] <= oz[0] + 1e-9:
            continue
        if convex_polygons_overlap(fp, other.footprint(), tol=gap):
            return False
    return True


def _inside_rect(fp: np.ndarray, rect, margin: float) -> bool:
    x0, y0, x1, y1 = rect
    return bool(
        np.all(fp[:, 0] >= x0 + margin) and np.all(fp[:, 0] <= x1 - margin)
        and np.all(fp[:, 1] >= y0 + margin) and np.all(fp[:, 1] <= y1 - margin)
    )


def _place_item(item, idx, parent, base_z, interior, placed, spec, rng) -> Obb:
    sx, sy, sz = item.size
    half = vec3(sx / 2, sy / 2, sz / 2)
    if parent is not None:
        pfp = parent.footprint()
        region = (pfp[:, 0].min(), pfp[:, 1].min(), pfp[:, 0].max(), pfp[:, 1].max())
    else:
        region = interior
    if item.position is not None:
        yaw = _item_yaw(item, rng)
        obb = Obb(vec3(item.position[0], item.position[1], base_z + sz / 2), half, yaw)
        if not _inside_rect(obb.footprint(), interior, 0.0):
            raise GenerationError(f"furniture {idx} ({item.class_label}) lies outside the room")
        if not item.annotation_only and not _footprint_clear(obb, placed, item.on_top_of, 0.0):
            raise GenerationError(f"furniture {idx} ({item.class_label}) overlaps another item")
        return obb
    for _ in range(_MAX_PLACE_TRIES):
        yaw = _item_yaw(item, rng)
        r = math.hypot(sx, sy) / 2
        x0, y0, x1, y1 = region
        if x1 - x0 < 2 * r or y1 - y0 < 2 * r:
            break
        c = rng.uniform([x0 + r, y0 + r], [x1 - r, y1 - r])
        obb = Obb(vec3(c[0], c[1], base_z + sz / 2), half, yaw)
        if not _inside_rect(obb.footprint(), interior, 0.0):
            continue
        if _footprint_clear(obb, placed, item.on_top_of, spec.min_gap):
            return obb
    raise GenerationError(
        f"could not place furniture {idx} ({item.class_label}): room is too crowded")


# ---------------------------------------------------------------------------
# Procedural assets for testing
# ---------------------------------------------------------------------------

def make_box_asset(extents, asset_id: str = "box") -> "Asset":
    from .scene import Asset

    half = np.asarray(extents, dtype=np.float64) / 2
    mesh = Obb(vec3(0, 0, 0), half, 0.0).to_mesh()
    return Asset(mesh=mesh, extents=np.asarray(extents, dtype=np.float64), asset_id=asset_id)


def make_lshape_asset(long_side=0.4, short_side=0.2, depth=0.2, height=0.3,
                      asset_id: str = "lshape") -> "Asset":
    """Two fused cuboids forming an L (concave footprint)."""
    from .scene import Asset

    a = Obb(vec3(long_side / 2, depth / 2, height / 2), vec3(long_side / 2, depth / 2, height / 2))
    b = Obb(vec3(short_side / 2, depth + (short_side / 2), height / 2),
            vec3(short_side / 2, short_side / 2, height / 2))
    mesh = TriangleMesh.concatenate([a.to_mesh(), b.to_mesh()])
    lo, hi = mesh.aabb()
    centered = mesh.transformed(None, -(lo + hi) / 2)
    return Asset(mesh=centered, extents=hi - lo, asset_id=asset_id)
