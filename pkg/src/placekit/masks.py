"""Dense valid-placement masks over the scene point cloud.

Physical plausibility comes from the heightmap grid (built with a
conservative footprint so validated placements never protrude past checked
cells) and is transferred to points. Anchor constraints are then evaluated
per physically-valid point at each rotation-bin center with the same box
geometry the benchmark checkers use; only visibility keeps its documented
approximations (bounding cuboid, fixed rotation, low resolution, evaluated
per grid cell).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AnchorNotFoundError, ParseError, ValidationError
from .constraints import Constraint, ThresholdConfig
from .geometry import (
    Obb,
    convex_clip,
    convex_hull_2d,
    minkowski_sum_convex,
    obb_min_distance,
    points_to_convex_polygon_distance,
    polygon_area,
)
from .plausibility import (
    BIN_CENTERS,
    DEFAULT_CELL_SIZE,
    ROTATION_BINS,
    build_heightmap_stack,
    compute_asset_footprints,
    compute_physical_grid,
    dilate_footprint,
    grid_point_labels,
    point_transfer,
)
from .scene import Anchor, Asset, SceneModel, Placement
from . import visibility as vis

MASK_MAGIC = b"PLMK"
MASK_VERSION = 1

_BIT_WEIGHTS = (1 << np.arange(ROTATION_BINS)).astype(np.uint8)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(eq=False)
class PlacementMask:
    """Per-point validity bit plus an 8-bin rotation-validity byte."""

    validity: np.ndarray  # (N,) bool
    rotations: np.ndarray  # (N,) uint8, bit y = rotation bin y
    scene_id: str = ""
    asset_id: str = ""
    prompt_id: str = ""
    context: "MaskGenerator | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validity = np.ascontiguousarray(self.validity, dtype=bool)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.uint8)
        if self.validity.shape != self.rotations.shape or self.validity.ndim != 1:
            raise ValidationError("mask arrays must be equal-length vectors")
        if np.any(~self.validity & (self.rotations != 0)):
            raise ValidationError("invalid points must carry zero rotation bits")
        if np.any(self.validity & (self.rotations == 0)):
            raise ValidationError("valid points need at least one rotation bit")

    @staticmethod
    def create(rotations: np.ndarray, scene_id="", asset_id="", prompt_id="",
               context=None) -> "PlacementMask":
        """Normalize: a point is valid exactly when some rotation bit is set."""
        rot = np.ascontiguousarray(rotations, dtype=np.uint8)
        return PlacementMask(rot != 0, rot, scene_id, asset_id, prompt_id, context)

    @property
    def num_points(self) -> int:
        return len(self.validity)

    @property
    def num_valid(self) -> int:
        return int(self.validity.sum())

    def rotation_bits(self) -> np.ndarray:
        """(N, 8) boolean view of the rotation bytes."""
        return (self.rotations[:, None] >> np.arange(ROTATION_BINS)[None, :]) & 1 != 0


def combine_masks(masks: list[PlacementMask]) -> PlacementMask:
    """Pointwise intersection; points left without rotation bits turn invalid."""
    if not masks:
        raise ValidationError("cannot combine zero masks")
    first = masks[0]
    rot = first.rotations.copy()
    for m in masks[1:]:
        if m.num_points != first.num_points:
            raise ValidationError("masks cover different point counts")
        if m.scene_id != first.scene_id or m.asset_id != first.asset_id:
            raise ValidationError("masks belong to different scene/asset pairs")
        rot &= m.rotations
    return PlacementMask.create(rot, first.scene_id, first.asset_id, first.prompt_id,
                                context=first.context)


def lift_to_center_frame(contact_point, asset: Asset, yaw: float) -> Placement:
    """Contact-frame point to benchmark-frame placement: up by half the height."""
    t = np.asarray(contact_point, dtype=np.float64).copy()
    t[2] += asset.extents[2] / 2.0
    return Placement(t, yaw)


# ---------------------------------------------------------------------------
# Mask file format
# ---------------------------------------------------------------------------

def write_mask(mask: PlacementMask, path) -> None:
    """Binary mask: magic, u16 version, u32 N, N validity bytes, N rotation
    bytes (little-endian), plus a JSON descriptor sidecar."""
    import json
    from pathlib import Path

    path = Path(path)
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<HI", MASK_VERSION, mask.num_points))
        f.write(mask.validity.astype(np.uint8).tobytes())
        f.write(mask.rotations.tobytes())
    desc = {
        "scene_id": mask.scene_id,
        "asset_id": mask.asset_id,
        "prompt_id": mask.prompt_id,
        "num_points": mask.num_points,
        "format_version": MASK_VERSION,
    }
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(desc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_mask(path) -> PlacementMask:
    import json
    from pathlib import Path

    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MASK_MAGIC:
        raise ParseError(f"not a mask file: {path}", offset=0)
    version, n = struct.unpack_from("<HI", data, 4)
    if version != MASK_VERSION:
        raise ParseError(f"unsupported mask version {version}", offset=4)
    need = 10 + 2 * n
    if len(data) < need:
        raise ParseError("truncated mask file", offset=len(data))
    validity = np.frombuffer(data, dtype=np.uint8, count=n, offset=10).astype(bool)
    rotations = np.frombuffer(data, dtype=np.uint8, count=n, offset=10 + n).copy()
    desc_path = path.with_suffix(".json")
    scene_id = asset_id = prompt_id = ""
    if desc_path.exists():
        with open(desc_path) as f:
            desc = json.load(f)
        scene_id = desc.get("scene_id", "")
        asset_id = desc.get("asset_id", "")
        prompt_id = desc.get("prompt_id", "")
    return PlacementMask(validity, rotations, scene_id, asset_id, prompt_id)


# ---------------------------------------------------------------------------
# Mask generation
# ---------------------------------------------------------------------------

def _rect_corners(hx: float, hy: float, yaw: float, center=(0.0, 0.0)) -> np.ndarray:
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center)


class MaskGenerator:
    """Caches the heightmap grid, point transfer, per-constraint point bits,
    and visibility fields for one (scene, asset) pair."""

    def __init__(self, scene: SceneModel, asset: Asset, cfg: ThresholdConfig | None = None,
                 cell_size: float = DEFAULT_CELL_SIZE):
        self.scene = scene
        self.asset = asset
        self.cfg = cfg or ThresholdConfig()
        self.cell_size = cell_size
        self.stack = build_heightmap_stack(scene.mesh, cell_size)
        self.footprint = compute_asset_footprints(asset, cell_size)
        guard = dilate_footprint(compute_asset_footprints(asset, cell_size, conservative=True))
        self.grid = compute_physical_grid(self.stack, guard, self.cfg.heightmap_range_tol)
        self._point_validity, self._point_rotations = grid_point_labels(self.grid, scene.points)
        self._tx, self._ty, self._tl = point_transfer(self.stack, scene.points)
        self._active = np.flatnonzero(self._point_rotations != 0)
        hx, hy = asset.extents[0] / 2.0, asset.extents[1] / 2.0
        self._rects = [_rect_corners(hx, hy, yaw) for yaw in BIN_CENTERS]
        self._reach = math.hypot(asset.extents[0], asset.extents[1]) / 2.0
        self._constraint_bits: dict[Constraint, np.ndarray] = {}
        self._vis_fields: dict[int, np.ndarray] = {}
        self._cell_x = self.stack.origin[0] + (np.arange(self.stack.dims[0]) + 0.5) * cell_size
        self._cell_y = self.stack.origin[1] + (np.arange(self.stack.dims[1]) + 0.5) * cell_size

    # -- public API ---------------------------------------------------------

    def physical_mask(self) -> PlacementMask:
        return PlacementMask.create(self._point_rotations, self.scene.scene_id,
                                    self.asset.asset_id, context=self)

    def constraint_mask(self, c: Constraint) -> PlacementMask:
        if c.relation == "plausible":
            return self.physical_mask()
        if c not in self._constraint_bits:
            self._constraint_bits[c] = self._evaluate(c)
        rot = self._constraint_bits[c] & self._point_rotations
        return PlacementMask.create(rot, self.scene.scene_id, self.asset.asset_id,
                                    context=self)

    def combined_mask(self, constraints: list[Constraint], prompt_id: str = "") -> PlacementMask:
        masks = [self.physical_mask()]
        masks += [self.constraint_mask(c) for c in constraints if c.relation != "plausible"]
        out = combine_masks(masks)
        out.prompt_id = prompt_id
        return out

    # -- per-point evaluation -----------------------------------------------

    def _anchors(self, class_label: str) -> list[Anchor]:
        found = self.scene.anchors_of_class(class_label)
        if not found:
            raise AnchorNotFoundError(
                f"no anchor of class {class_label!r} in scene {self.scene.scene_id}")
        return found

    def _evaluate(self, c: Constraint) -> np.ndarray:
        """uint8 per point: rotation bins at which the constraint holds,
        evaluated on the physically valid support."""
        if c.relation in ("near", "adjacent"):
            bits = self._eval_proximity(c)
        elif c.relation in ("on", "above", "below"):
            bits = self._eval_vertical(c)
        elif c.relation == "between":
            bits = self._eval_between(c)
        elif c.relation == "facing":
            bits = self._eval_facing(c)
        elif c.relation in ("is_visible", "not_visible"):
            bits = self._eval_visibility(c)
        else:
            raise ValidationError(f"no mask evaluator for {c.relation}")
        out = np.zeros(self.scene.num_points, dtype=np.uint8)
        out[self._active] = bits
        return out

    def _eval_proximity(self, c: Constraint) -> np.ndarray:
        cfg = self.cfg
        threshold = (cfg.adjacent_tol if c.relation == "adjacent"
                     else cfg.near_room_fraction * self.scene.room_size())
        pts = self.scene.points[self._active]
        h = self.asset.extents[2]
        z = pts[:, 2]
        bins = np.zeros((len(pts), ROTATION_BINS), dtype=bool)
        for anchor in self._anchors(c.anchor):
            zb, zt = anchor.obb.z_interval()
            dz = np.maximum(0.0, np.maximum(zb - (z + h), z - zt))
            near_enough = dz <= threshold
            if not near_enough.any():
                continue
            fpoly = anchor.obb.footprint()
            for b in range(ROTATION_BINS):
                mink = minkowski_sum_convex(fpoly, -self._rects[b])
                dxy = points_to_convex_polygon_distance(pts[:, :2], mink)
                bins[:, b] |= dxy**2 + dz**2 <= threshold**2
        return bins @ _BIT_WEIGHTS

    def _eval_vertical(self, c: Constraint) -> np.ndarray:
        cfg = self.cfg
        pts = self.scene.points[self._active]
        h = self.asset.extents[2]
        z = pts[:, 2]
        asset_area = float(self.asset.extents[0] * self.asset.extents[1])
        bins = np.zeros((len(pts), ROTATION_BINS), dtype=bool)
        for anchor in self._anchors(c.anchor):
            zb, zt = anchor.obb.z_interval()
            if c.relation == "on":
                z_ok = np.abs(z - zt) <= cfg.on_gap_tol
            elif c.relation == "above":
                z_ok = z > zt + cfg.above_below_min_gap
            else:
                z_ok = (z + h) < zb - cfg.above_below_min_gap
            poly = anchor.obb.footprint()
            in_window = (
                (pts[:, 0] >= poly[:, 0].min() - self._reach)
                & (pts[:, 0] <= poly[:, 0].max() + self._reach)
                & (pts[:, 1] >= poly[:, 1].min() - self._reach)
                & (pts[:, 1] <= poly[:, 1].max() + self._reach)
            )
            cand = np.flatnonzero(z_ok & in_window)
            min_area = min(asset_area, polygon_area(poly))
            for i in cand:
                xy = pts[i, :2]
                for b in range(ROTATION_BINS):
                    if bins[i, b]:
                        continue
                    inter = polygon_area(convex_clip(self._rects[b] + xy, poly))
                    if inter / min_area >= cfg.vertical_iom_min:
                        bins[i, b] = True
        return bins @ _BIT_WEIGHTS

    def _eval_between(self, c: Constraint) -> np.ndarray:
        cfg = self.cfg
        pts = self.scene.points[self._active]
        h = self.asset.extents[2]
        z = pts[:, 2]
        asset_area = float(self.asset.extents[0] * self.asset.extents[1])
        bins = np.zeros((len(pts), ROTATION_BINS), dtype=bool)
        i1 = self._anchors(c.anchor)
        i2 = self._anchors(c.anchor2)
        pairs = [(a, b) for a in i1 for b in i2 if a.instance_id != b.instance_id]
        if not pairs:
            raise ValidationError("between requires two distinct anchors")
        for a1, a2 in pairs:
            if obb_min_distance(a1.obb, a2.obb) > cfg.between_anchor_max_dist:
                continue
            band = (min(a1.obb.z_interval()[0], a2.obb.z_interval()[0]),
                    max(a1.obb.z_interval()[1], a2.obb.z_interval()[1]))
            band_len = band[1] - band[0]
            overlap = np.minimum(z + h, band[1]) - np.maximum(z, band[0])
            z_ok = (np.maximum(overlap, 0.0) / min(h, band_len)) >= cfg.between_iom_min
            if not z_ok.any():
                continue
            if cfg.between_mode == "line":
                seg0, seg1 = a1.obb.center[:2], a2.obb.center[:2]
                d = seg1 - seg0
                denom = float(d @ d)
                t = np.clip((pts[:, :2] - seg0) @ d / denom, 0, 1) if denom else np.zeros(len(pts))
                dist = np.linalg.norm(pts[:, :2] - (seg0 + t[:, None] * d[None, :]), axis=1)
                ok = z_ok & (dist <= max(self.asset.extents[0], self.asset.extents[1]) / 2.0)
                bins |= ok[:, None]
                continue
            hull = convex_hull_2d(np.concatenate([a1.obb.footprint(), a2.obb.footprint()]))
            hull_area = polygon_area(hull)
            p1, p2 = a1.obb.footprint(), a2.obb.footprint()
            area1, area2 = polygon_area(p1), polygon_area(p2)
            in_window = (
                (pts[:, 0] >= hull[:, 0].min() - self._reach)
                & (pts[:, 0] <= hull[:, 0].max() + self._reach)
                & (pts[:, 1] >= hull[:, 1].min() - self._reach)
                & (pts[:, 1] <= hull[:, 1].max() + self._reach)
            )
            for i in np.flatnonzero(z_ok & in_window):
                xy = pts[i, :2]
                for b in range(ROTATION_BINS):
                    if bins[i, b]:
                        continue
                    rect = self._rects[b] + xy
                    if polygon_area(convex_clip(rect, hull)) / min(asset_area, hull_area) < cfg.between_iom_min:
                        continue
                    if polygon_area(convex_clip(rect, p1)) / min(asset_area, area1) > cfg.between_overlap_max:
                        continue
                    if polygon_area(convex_clip(rect, p2)) / min(asset_area, area2) > cfg.between_overlap_max:
                        continue
                    bins[i, b] = True
        return bins @ _BIT_WEIGHTS

    def _eval_facing(self, c: Constraint) -> np.ndarray:
        cfg = self.cfg
        pts = self.scene.points[self._active]
        cos_limit = math.cos(math.radians(cfg.facing_half_angle_deg))
        hx = self.asset.extents[0] / 2.0
        bins = np.zeros((len(pts), ROTATION_BINS), dtype=bool)
        for anchor in self._anchors(c.anchor):
            d = anchor.obb.center[:2][None, :] - pts[:, :2]
            dist = np.linalg.norm(d, axis=1)
            dist_ok = (dist > 1e-9) & (dist <= cfg.facing_max_dist)
            for b, yaw in enumerate(BIN_CENTERS):
                f = np.array([-math.sin(yaw), math.cos(yaw)])
                cos_angle = (d @ f) / np.where(dist > 0, dist, 1.0)
                angle_ok = cos_angle >= cos_limit
                lat = np.array([f[1], -f[0]])
                span_anchor = anchor.obb.footprint() @ lat
                n_lo, n_hi = span_anchor.min(), span_anchor.max()
                c_lat = pts[:, :2] @ lat
                ov = np.minimum(c_lat + hx, n_hi) - np.maximum(c_lat - hx, n_lo)
                iom = np.maximum(ov, 0.0) / min(2 * hx, n_hi - n_lo)
                bins[:, b] |= dist_ok & angle_ok & (iom >= cfg.facing_lateral_iom_min)
        return bins @ _BIT_WEIGHTS

    def _eval_visibility(self, c: Constraint) -> np.ndarray:
        """Dataset-approximate visibility looked up per grid cell: bounding
        cuboid at fixed rotation, low resolution; rotation-uniform."""
        anchors = self._anchors(c.anchor)
        vols = [float(np.prod(a.obb.half_extents)) for a in anchors]
        anchor = anchors[int(np.argmax(vols))]
        if anchor.instance_id not in self._vis_fields:
            self._vis_fields[anchor.instance_id] = self._compute_vis_field(anchor)
        field_ = self._vis_fields[anchor.instance_id]
        tx, ty, tl = (self._tx[self._active], self._ty[self._active], self._tl[self._active])
        state = field_[tx, ty, tl]
        ok = state == 1 if c.relation == "is_visible" else state == 0
        return np.where(ok, np.uint8(255), np.uint8(0))

    def _compute_vis_field(self, anchor: Anchor) -> np.ndarray:
        """(nx, ny, L) int8: 1 visible, 0 hidden, -1 never evaluated.

        Evaluated only where some rotation bin is physically valid; the
        physical AND removes everything else anyway.
        """
        nx, ny = self.stack.dims
        field_ = np.full((nx, ny, self.stack.num_layers), -1, dtype=np.int8)
        half = self.asset.extents * 0.5
        h = self.asset.extents[2]
        candidates = np.argwhere(self.grid.valid.any(axis=3))
        for ix, iy, l in candidates:
            z = self.stack.heights[ix, iy, l]
            center = np.array([self._cell_x[ix], self._cell_y[iy], z + h / 2.0])
            cuboid = Obb(center, half, 0.0).to_mesh()  # fixed rotation bin 0
            try:
                camera = vis.build_anchor_camera(self.scene, anchor, center,
                                                 fov_deg=self.cfg.vis_fov_deg,
                                                 resolution=self.cfg.vis_res_dataset)
            except ValidationError:
                field_[ix, iy, l] = 0
                continue
            field_[ix, iy, l] = 1 if vis.visibility_test(self.scene, cuboid, camera) else 0
        return field_


def constraint_point_mask(scene: SceneModel, asset: Asset, c: Constraint,
                          physical: PlacementMask, cfg: ThresholdConfig | None = None,
                          cell_size: float = DEFAULT_CELL_SIZE) -> PlacementMask:
    """Mask for one constraint on the physically valid support.

    Reuses the generator attached to ``physical`` when available.
    """
    gen = physical.context
    if gen is None or gen.scene is not scene or gen.asset is not asset:
        gen = MaskGenerator(scene, asset, cfg, cell_size)
    return gen.constraint_mask(c)
