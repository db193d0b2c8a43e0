"""Rule-based placement validators and whole-prompt evaluation.

One boolean checker per constraint type, evaluated against anchor boxes and
the scene mesh. A constraint names an anchor *class*; any instance of that
class may satisfy it, except visibility which uses the largest instance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, fields

import numpy as np

from .errors import AnchorNotFoundError, ValidationError
from .geometry import (
    Obb,
    convex_clip,
    convex_hull_2d,
    footprint_iom,
    interval_iom,
    meshes_intersect,
    obb_min_distance,
    polygon_area,
    raycast_all,
    Ray,
    rot_z,
)
from .scene import Anchor, Asset, Placement, SceneModel, pose_asset, posed_obb
from . import visibility as vis

# Lift applied before the collision test so that exact surface contact counts
# as resting rather than interpenetration.
CONTACT_LIFT = 1e-3

RELATIONS = ("plausible", "near", "adjacent", "on", "above", "below",
             "between", "facing", "is_visible", "not_visible")

GROUPS = {
    "plausible": "physical",
    "near": "spatial",
    "adjacent": "spatial",
    "on": "spatial",
    "above": "spatial",
    "below": "spatial",
    "between": "spatial",
    "facing": "rotational",
    "is_visible": "visibility",
    "not_visible": "visibility",
}

VISIBILITY_ANCHOR_CLASSES = ("tv", "door", "window")


@dataclass(frozen=True)
class Constraint:
    """One placement constraint; anchors are class labels."""

    relation: str
    anchor: str | None = None
    anchor2: str | None = None

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValidationError(f"unknown relation {self.relation!r}")
        if self.relation == "plausible":
            if self.anchor is not None or self.anchor2 is not None:
                raise ValidationError("plausible takes no anchors")
        elif self.relation == "between":
            if not self.anchor or not self.anchor2:
                raise ValidationError("between needs two anchor classes")
        else:
            if not self.anchor or self.anchor2 is not None:
                raise ValidationError(f"{self.relation} takes exactly one anchor class")

    @property
    def group(self) -> str:
        return GROUPS[self.relation]

    def to_json(self) -> dict:
        d = {"relation": self.relation}
        if self.anchor is not None:
            d["anchor"] = self.anchor
        if self.anchor2 is not None:
            d["anchor2"] = self.anchor2
        return d

    @staticmethod
    def from_json(d: dict) -> "Constraint":
        return Constraint(d["relation"], d.get("anchor"), d.get("anchor2"))


@dataclass
class ThresholdConfig:
    """All rule thresholds; defaults are the published benchmark values."""

    near_room_fraction: float = 0.01
    adjacent_tol: float = 0.03
    vertical_iom_min: float = 0.5
    on_gap_tol: float = 0.01
    above_below_min_gap: float = 0.01
    between_iom_min: float = 0.5
    between_overlap_max: float = 0.3
    between_anchor_max_dist: float = 1.5
    facing_max_dist: float = 2.0
    facing_half_angle_deg: float = 30.0
    facing_lateral_iom_min: float = 0.5
    support_gap_tol: float = 0.01
    heightmap_range_tol: float = 0.10
    vis_fov_deg: float = 60.0
    vis_res_bench: int = 256
    vis_res_dataset: int = 64
    between_mode: str = "iom"  # "iom" (supplement semantics) or "line" (main text)

    def __post_init__(self):
        for f in fields(self):
            if f.name != "between_mode" and getattr(self, f.name) <= 0:
                raise ValidationError(f"{f.name} must be positive")
        if not 0 < self.facing_half_angle_deg < 90:
            raise ValidationError("facing_half_angle_deg must lie in (0, 90)")
        if not 0 < self.vis_fov_deg < 180:
            raise ValidationError("vis_fov_deg must lie in (0, 180)")
        if self.between_mode not in ("iom", "line"):
            raise ValidationError("between_mode must be 'iom' or 'line'")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(data: dict) -> "ThresholdConfig":
        return ThresholdConfig(**data)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "ThresholdConfig":
        with open(path) as f:
            return ThresholdConfig.from_json(json.load(f))


@dataclass
class ConstraintResult:
    constraint: Constraint
    satisfied: bool
    error: str | None = None

    def to_json(self) -> dict:
        d = {"constraint": self.constraint.to_json(), "satisfied": bool(self.satisfied)}
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class ValidityReport:
    results: list[ConstraintResult]
    physical: bool
    spatial: bool
    rotational: bool
    visibility: bool

    @property
    def language_ok(self) -> bool:
        return all(r.satisfied for r in self.results if r.constraint.group != "physical")

    @property
    def complete_ok(self) -> bool:
        return self.language_ok and self.physical

    def to_json(self) -> dict:
        return {
            "constraints": [r.to_json() for r in self.results],
            "groups": {"physical": self.physical, "spatial": self.spatial,
                       "rotational": self.rotational, "visibility": self.visibility},
            "language_ok": self.language_ok,
            "complete_ok": self.complete_ok,
        }


def _instances(scene: SceneModel, class_label: str) -> list[Anchor]:
    found = scene.anchors_of_class(class_label)
    if not found:
        raise AnchorNotFoundError(f"no anchor of class {class_label!r} in scene {scene.scene_id}")
    return found


def _largest_instance(scene: SceneModel, class_label: str) -> Anchor:
    found = _instances(scene, class_label)
    vols = [float(np.prod(a.obb.half_extents)) for a in found]
    return found[int(np.argmax(vols))]


# ---------------------------------------------------------------------------
# Individual checkers
# ---------------------------------------------------------------------------

def check_physical(scene: SceneModel, asset: Asset, p: Placement,
                   cfg: ThresholdConfig) -> bool:
    """No interpenetration with the scene mesh, and resting on a surface.

    The asset is lifted by CONTACT_LIFT for the collision test so that exact
    contact (bottom flush with a surface) does not register as intersection.
    """
    posed, obb = pose_asset(asset, p)
    lifted = posed.transformed(None, np.array([0.0, 0.0, CONTACT_LIFT]))
    if meshes_intersect(lifted, scene.mesh):
        return False
    bottom = obb.z_interval()[0]
    ray = Ray(np.array([p.t[0], p.t[1], bottom + CONTACT_LIFT]), np.array([0.0, 0.0, -1.0]))
    hits = raycast_all(scene.mesh, ray)
    if len(hits) == 0:
        return False
    gap = bottom - hits.points[0][2]
    return gap <= cfg.support_gap_tol


def _check_proximity_one(obb: Obb, anchor: Anchor, threshold: float) -> bool:
    return obb_min_distance(obb, anchor.obb) <= threshold


def check_proximity(kind: str, scene: SceneModel, asset: Asset, p: Placement,
                    anchor: str | Anchor, cfg: ThresholdConfig) -> bool:
    if kind not in ("near", "adjacent"):
        raise ValidationError(f"bad proximity kind {kind!r}")
    threshold = cfg.adjacent_tol if kind == "adjacent" else cfg.near_room_fraction * scene.room_size()
    obb = posed_obb(asset, p)
    insts = [anchor] if isinstance(anchor, Anchor) else _instances(scene, anchor)
    return any(_check_proximity_one(obb, a, threshold) for a in insts)


def _check_vertical_one(kind: str, obb: Obb, anchor: Anchor, cfg: ThresholdConfig) -> bool:
    if footprint_iom(obb, anchor.obb) < cfg.vertical_iom_min:
        return False
    a_bottom, a_top = obb.z_interval()
    n_bottom, n_top = anchor.obb.z_interval()
    if kind == "on":
        return abs(a_bottom - n_top) <= cfg.on_gap_tol
    if kind == "above":
        # strict: the boundary gap (exactly on_gap_tol) belongs to "on"
        return a_bottom > n_top + cfg.above_below_min_gap
    return a_top < n_bottom - cfg.above_below_min_gap


def check_vertical(kind: str, scene: SceneModel, asset: Asset, p: Placement,
                   anchor: str | Anchor, cfg: ThresholdConfig) -> bool:
    if kind not in ("on", "above", "below"):
        raise ValidationError(f"bad vertical kind {kind!r}")
    obb = posed_obb(asset, p)
    insts = [anchor] if isinstance(anchor, Anchor) else _instances(scene, anchor)
    return any(_check_vertical_one(kind, obb, a, cfg) for a in insts)


def _between_pair(obb: Obb, a1: Anchor, a2: Anchor, cfg: ThresholdConfig) -> bool:
    if obb_min_distance(a1.obb, a2.obb) > cfg.between_anchor_max_dist:
        return False
    z_band = (min(a1.obb.z_interval()[0], a2.obb.z_interval()[0]),
              max(a1.obb.z_interval()[1], a2.obb.z_interval()[1]))
    if interval_iom(obb.z_interval(), z_band) < cfg.between_iom_min:
        return False
    if cfg.between_mode == "line":
        seg0, seg1 = a1.obb.center[:2], a2.obb.center[:2]
        d = seg1 - seg0
        denom = float(d @ d)
        t = 0.0 if denom == 0 else float(np.clip((obb.center[:2] - seg0) @ d / denom, 0, 1))
        dist = float(np.linalg.norm(obb.center[:2] - (seg0 + t * d)))
        return dist <= float(max(obb.half_extents[0], obb.half_extents[1]))
    fp = obb.footprint()
    hull = convex_hull_2d(np.concatenate([a1.obb.footprint(), a2.obb.footprint()]))
    inter = polygon_area(convex_clip(fp, hull))
    smaller = min(polygon_area(fp), polygon_area(hull))
    if smaller <= 0 or inter / smaller < cfg.between_iom_min:
        return False
    if footprint_iom(obb, a1.obb) > cfg.between_overlap_max:
        return False
    if footprint_iom(obb, a2.obb) > cfg.between_overlap_max:
        return False
    return True


def check_between(scene: SceneModel, asset: Asset, p: Placement,
                  anchor1: str | Anchor, anchor2: str | Anchor,
                  cfg: ThresholdConfig) -> bool:
    obb = posed_obb(asset, p)
    i1 = [anchor1] if isinstance(anchor1, Anchor) else _instances(scene, anchor1)
    i2 = [anchor2] if isinstance(anchor2, Anchor) else _instances(scene, anchor2)
    pairs = [(a, b) for a in i1 for b in i2 if a.instance_id != b.instance_id]
    if not pairs:
        raise ValidationError("between requires two distinct anchors")
    return any(_between_pair(obb, a, b, cfg) for a, b in pairs)


def _check_facing_one(asset: Asset, p: Placement, anchor: Anchor,
                      cfg: ThresholdConfig) -> bool:
    f = rot_z(p.yaw)[:2, :2] @ np.array([0.0, 1.0])
    d = anchor.obb.center[:2] - p.t[:2]
    dist = float(np.linalg.norm(d))
    if dist < 1e-9 or dist > cfg.facing_max_dist:
        return False
    cos_angle = float(np.clip(f @ d / dist, -1.0, 1.0))
    if math.degrees(math.acos(cos_angle)) > cfg.facing_half_angle_deg:
        return False
    lateral = np.array([-f[1], f[0]])
    span_asset = posed_obb(asset, p).footprint() @ lateral
    span_anchor = anchor.obb.footprint() @ lateral
    return interval_iom((span_asset.min(), span_asset.max()),
                        (span_anchor.min(), span_anchor.max())) >= cfg.facing_lateral_iom_min


def check_facing(scene: SceneModel, asset: Asset, p: Placement,
                 anchor: str | Anchor, cfg: ThresholdConfig) -> bool:
    insts = [anchor] if isinstance(anchor, Anchor) else _instances(scene, anchor)
    return any(_check_facing_one(asset, p, a, cfg) for a in insts)


def check_visibility(kind: str, scene: SceneModel, asset: Asset, p: Placement,
                     anchor: str | Anchor, cfg: ThresholdConfig,
                     mode: str = "exact") -> bool:
    """Visibility from the anchor camera; ``mode`` picks benchmark or dataset
    approximation (bounding cuboid at fixed rotation, low resolution)."""
    if kind not in ("is_visible", "not_visible"):
        raise ValidationError(f"bad visibility kind {kind!r}")
    if mode not in ("exact", "approx"):
        raise ValidationError(f"bad visibility mode {mode!r}")
    inst = anchor if isinstance(anchor, Anchor) else _largest_instance(scene, anchor)
    if mode == "exact":
        resolution = cfg.vis_res_bench
        asset_mesh, _ = pose_asset(asset, p)
    else:
        resolution = cfg.vis_res_dataset
        asset_mesh = Obb(p.t.copy(), asset.extents * 0.5, 0.0).to_mesh()  # fixed rotation bin 0
    camera = vis.build_anchor_camera(scene, inst, p.t, fov_deg=cfg.vis_fov_deg,
                                     resolution=resolution)
    visible = vis.visibility_test(scene, asset_mesh, camera)
    return visible if kind == "is_visible" else not visible


# ---------------------------------------------------------------------------
# Whole-prompt evaluation
# ---------------------------------------------------------------------------

def check_constraint(scene: SceneModel, asset: Asset, p: Placement, c: Constraint,
                     cfg: ThresholdConfig, vis_mode: str = "exact") -> bool:
    if c.relation == "plausible":
        return check_physical(scene, asset, p, cfg)
    if c.relation in ("near", "adjacent"):
        return check_proximity(c.relation, scene, asset, p, c.anchor, cfg)
    if c.relation in ("on", "above", "below"):
        return check_vertical(c.relation, scene, asset, p, c.anchor, cfg)
    if c.relation == "between":
        return check_between(scene, asset, p, c.anchor, c.anchor2, cfg)
    if c.relation == "facing":
        return check_facing(scene, asset, p, c.anchor, cfg)
    return check_visibility(c.relation, scene, asset, p, c.anchor, cfg, mode=vis_mode)


def evaluate_prompt(scene: SceneModel, asset: Asset, p: Placement,
                    constraints: list[Constraint], cfg: ThresholdConfig | None = None,
                    vis_mode: str = "exact") -> ValidityReport:
    """Evaluate every constraint; physical plausibility is always evaluated,
    whether or not a plausible constraint is present."""
    cfg = cfg or ThresholdConfig()
    physical_ok = check_physical(scene, asset, p, cfg)
    results = []
    for c in constraints:
        if c.relation == "plausible":
            results.append(ConstraintResult(c, physical_ok))
            continue
        try:
            ok = check_constraint(scene, asset, p, c, cfg, vis_mode=vis_mode)
            results.append(ConstraintResult(c, ok))
        except (AnchorNotFoundError, ValidationError) as exc:
            results.append(ConstraintResult(c, False, error=str(exc)))
    group_flags = {}
    for group in ("spatial", "rotational", "visibility"):
        in_group = [r.satisfied for r in results if r.constraint.group == group]
        group_flags[group] = all(in_group)  # vacuously true when empty
    return ValidityReport(results=results, physical=physical_ok,
                          spatial=group_flags["spatial"],
                          rotational=group_flags["rotational"],
                          visibility=group_flags["visibility"])
