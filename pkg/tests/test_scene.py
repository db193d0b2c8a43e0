import json
import math

import numpy as np
import pytest

from placekit import ply
from placekit.errors import GenerationError, ParseError, ValidationError
from placekit.geometry import Obb, TriangleMesh, convex_polygons_overlap, vec3
from placekit.scene import (
    Asset,
    Placement,
    export_scene,
    ingest_scene,
    load_asset,
    pose_asset,
    sample_point_cloud,
    save_asset,
)
from placekit.synth import (
    FurnitureItem,
    Opening,
    SynthSceneSpec,
    generate_synthetic_scene,
    make_box_asset,
    make_lshape_asset,
)


def floor_mesh():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def simple_spec(seed=0, **kw):
    defaults = dict(
        scene_id="room",
        room=(4.0, 4.0),
        openings=[Opening(wall="n", kind="window", offset=2.0, width=1.0, z0=0.9, z1=1.8),
                  Opening(wall="e", kind="door", offset=1.5, width=0.9, z0=0.0, z1=2.0)],
        furniture=[
            FurnitureItem("table", (1.0, 0.6, 0.75), position=(1.5, 1.2)),
            FurnitureItem("chair", (0.45, 0.45, 0.9), position=(3.0, 2.8), yaw=0.5),
            FurnitureItem("tv", (0.9, 0.1, 0.5), position=(1.5, 1.2), on_top_of=0),
        ],
        seed=seed,
    )
    defaults.update(kw)
    return SynthSceneSpec(**defaults)


# ---------------------------------------------------------------------------
# PLY round trips
# ---------------------------------------------------------------------------

def test_ply_mesh_roundtrip_binary(tmp_path):
    m = Obb(vec3(0.3, -0.2, 0.5), vec3(0.4, 0.25, 0.5), 0.7).to_mesh()
    colored = TriangleMesh(m.vertices, m.triangles, np.tile([0.2, 0.4, 0.6], (8, 1)))
    p = tmp_path / "box.ply"
    ply.write_mesh(p, colored)
    back = ply.read_mesh(p)
    np.testing.assert_array_equal(back.vertices, colored.vertices)
    np.testing.assert_array_equal(back.triangles, colored.triangles)
    np.testing.assert_allclose(back.colors, colored.colors, atol=1 / 255)


def test_ply_mesh_roundtrip_ascii(tmp_path):
    m = Obb(vec3(0, 0, 0.5), vec3(0.5, 0.5, 0.5)).to_mesh()
    p = tmp_path / "box_ascii.ply"
    ply.write_mesh(p, m, ascii_format=True)
    back = ply.read_mesh(p)
    np.testing.assert_allclose(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_ply_malformed_raises_parse_error_with_offset():
    with pytest.raises(ParseError):
        ply.read_mesh(b"not a ply file at all")
    # truncated body must carry a byte offset
    m = Obb(vec3(0, 0, 0.5), vec3(0.5, 0.5, 0.5)).to_mesh()
    import io, tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.ply")
        ply.write_mesh(path, m)
        blob = open(path, "rb").read()
        with pytest.raises(ParseError) as exc:
            ply.read_mesh(blob[:-40])
        assert exc.value.offset is not None


# ---------------------------------------------------------------------------
# ingest / export
# ---------------------------------------------------------------------------

def test_ingest_minimal_scene():
    ann = {
        "scene_id": "s1",
        "anchors": [{"id": 0, "class": "table", "center": [0.5, 0.5, 0.4],
                     "half_extents": [0.3, 0.2, 0.4], "yaw": 0.0}],
    }
    import io, tempfile, os
    with tempfile.TemporaryDirectory() as d:
        mesh_path = os.path.join(d, "m.ply")
        ply.write_mesh(mesh_path, floor_mesh())
        scene = ingest_scene(mesh_path, ann, density=100, seed=1)
    assert len(scene.anchors) == 1
    assert scene.anchors[0].class_label == "table"
    assert scene.num_points == 100  # 1 m^2 at density 100


def test_ingest_rejects_zero_half_extent():
    ann = {"scene_id": "s", "anchors": [{"id": 0, "class": "x", "center": [0, 0, 0],
                                         "half_extents": [0.0, 1, 1], "yaw": 0}]}
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        mesh_path = os.path.join(d, "m.ply")
        ply.write_mesh(mesh_path, floor_mesh())
        with pytest.raises(ValidationError):
            ingest_scene(mesh_path, ann)


def test_export_ingest_roundtrip_identity(tmp_path):
    scene = generate_synthetic_scene(simple_spec(seed=3))
    ann1 = export_scene(scene, tmp_path / "a")
    s2 = ingest_scene((tmp_path / "a" / "room.ply"), ann1)
    ann2 = export_scene(s2, tmp_path / "b")
    s3 = ingest_scene((tmp_path / "b" / "room.ply"), ann2)
    # geometry is lossless immediately
    np.testing.assert_array_equal(s2.mesh.vertices, scene.mesh.vertices)
    np.testing.assert_array_equal(s2.mesh.triangles, scene.mesh.triangles)
    np.testing.assert_array_equal(s2.points, scene.points)
    assert len(s2.anchors) == len(scene.anchors)
    for a, b in zip(scene.anchors, s2.anchors):
        assert a.instance_id == b.instance_id and a.class_label == b.class_label
        np.testing.assert_array_equal(a.obb.center, b.obb.center)
        np.testing.assert_array_equal(a.obb.half_extents, b.obb.half_extents)
        assert a.obb.yaw == b.obb.yaw
    # colors stabilise after one uchar quantization; second trip is exact
    np.testing.assert_allclose(s2.colors, scene.colors, atol=1 / 255 + 1e-12)
    np.testing.assert_array_equal(s3.colors, s2.colors)
    np.testing.assert_array_equal(s3.points, s2.points)
    # and the files themselves are byte-identical across the second trip
    assert (tmp_path / "a" / "room.json").read_bytes() == (tmp_path / "b" / "room.json").read_bytes()
    assert (tmp_path / "a" / "room.ply").read_bytes() == (tmp_path / "b" / "room.ply").read_bytes()


# ---------------------------------------------------------------------------
# pose_asset
# ---------------------------------------------------------------------------

def test_pose_identity():
    asset = make_box_asset((0.2, 0.4, 0.3))
    mesh, obb = pose_asset(asset, Placement(vec3(0, 0, 0), 0.0))
    np.testing.assert_allclose(mesh.vertices, asset.mesh.vertices)
    np.testing.assert_array_equal(obb.center, [0, 0, 0])


def test_pose_quarter_turn_swaps_xy_extent():
    asset = make_box_asset((0.2, 0.4, 0.3))
    mesh, obb = pose_asset(asset, Placement(vec3(0, 0, 0), math.pi / 2))
    lo, hi = mesh.aabb()
    np.testing.assert_allclose(hi - lo, [0.4, 0.2, 0.3], atol=1e-9)
    lo2, hi2 = obb.aabb()
    np.testing.assert_allclose(hi2 - lo2, [0.4, 0.2, 0.3], atol=1e-9)


def test_pose_preserves_z_extent_and_distances():
    rng = np.random.default_rng(8)
    asset = make_lshape_asset()
    for _ in range(20):
        p = Placement(rng.uniform(-2, 2, 3), rng.uniform(0, 2 * math.pi))
        mesh, obb = pose_asset(asset, p)
        lo, hi = mesh.aabb()
        # yaw never touches z: posed z is exactly canonical z plus the translation
        np.testing.assert_array_equal(mesh.vertices[:, 2], asset.mesh.vertices[:, 2] + p.t[2])
        assert hi[2] - lo[2] == pytest.approx(asset.extents[2], abs=1e-12)
        # rigid: pairwise distances preserved
        i, j = rng.integers(0, asset.mesh.num_vertices, 2)
        d0 = np.linalg.norm(asset.mesh.vertices[i] - asset.mesh.vertices[j])
        d1 = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j])
        assert d1 == pytest.approx(d0, abs=1e-9)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def test_empty_room_has_walls_and_opening_anchors():
    spec = SynthSceneSpec(scene_id="empty", room=(4.0, 4.0),
                          openings=[Opening("s", "door", 2.0, 0.9, 0.0, 2.0)])
    scene = generate_synthetic_scene(spec)
    assert [a.class_label for a in scene.anchors] == ["door"]
    lo, hi = scene.mesh.aabb()
    assert hi[2] == pytest.approx(2.5)  # wall height
    assert scene.room_size() == pytest.approx(4.0)


def test_same_seed_identical_output(tmp_path):
    s1 = generate_synthetic_scene(simple_spec(seed=9))
    s2 = generate_synthetic_scene(simple_spec(seed=9))
    np.testing.assert_array_equal(s1.mesh.vertices, s2.mesh.vertices)
    np.testing.assert_array_equal(s1.points, s2.points)
    export_scene(s1, tmp_path / "x")
    export_scene(s2, tmp_path / "y")
    assert (tmp_path / "x" / "room.ply").read_bytes() == (tmp_path / "y" / "room.ply").read_bytes()
    assert (tmp_path / "x" / "room_points.ply").read_bytes() == (tmp_path / "y" / "room_points.ply").read_bytes()


def test_random_specs_furniture_inside_and_disjoint():
    rng = np.random.default_rng(42)
    classes = ["table", "chair", "desk", "sofa", "bed"]
    for k in range(100):
        n_items = int(rng.integers(1, 6))
        spec = SynthSceneSpec(
            scene_id=f"r{k}",
            room=(float(rng.uniform(3.5, 6)), float(rng.uniform(3.5, 6))),
            furniture=[
                FurnitureItem(classes[int(rng.integers(0, len(classes)))],
                              (float(rng.uniform(0.3, 1.2)), float(rng.uniform(0.3, 1.2)),
                               float(rng.uniform(0.3, 1.0))),
                              yaw="random")
                for _ in range(n_items)
            ],
            seed=int(rng.integers(0, 1 << 31)),
            point_density=20,
        )
        try:
            scene = generate_synthetic_scene(spec)
        except GenerationError:
            continue  # crowded room; acceptable outcome per spec
        lo, hi = scene.mesh.aabb()
        furn = [a for a in scene.anchors if a.class_label in classes]
        for a in furn:
            c = a.obb.corners()
            assert np.all(c[:, 0] >= lo[0] - 1e-9) and np.all(c[:, 0] <= hi[0] + 1e-9)
            assert np.all(c[:, 1] >= lo[1] - 1e-9) and np.all(c[:, 1] <= hi[1] + 1e-9)
        for i in range(len(furn)):
            for j in range(i + 1, len(furn)):
                zi, zj = furn[i].obb.z_interval(), furn[j].obb.z_interval()
                if min(zi[1], zj[1]) - max(zi[0], zj[0]) <= 1e-9:
                    continue
                assert not convex_polygons_overlap(
                    furn[i].obb.footprint(), furn[j].obb.footprint(), tol=-1e-9)


def test_unsatisfiable_spec_raises():
    spec = SynthSceneSpec(
        room=(3.0, 3.0),
        furniture=[FurnitureItem("bed", (2.5, 2.5, 0.5)), FurnitureItem("sofa", (2.5, 2.5, 0.5))],
    )
    with pytest.raises(GenerationError):
        generate_synthetic_scene(spec)


def test_spec_json_roundtrip():
    spec = simple_spec(seed=5)
    data = json.loads(json.dumps(spec.to_json()))
    back = SynthSceneSpec.from_json(data)
    assert back == spec


# ---------------------------------------------------------------------------
# point sampling
# ---------------------------------------------------------------------------

def test_sampling_flat_floor_density():
    pos, col = sample_point_cloud(floor_mesh(), 100.0, seed=0)
    assert len(pos) == 100
    assert np.all(pos[:, 2] == 0.0)


def test_sampling_rejects_zero_density():
    with pytest.raises(ValidationError):
        sample_point_cloud(floor_mesh(), 0.0)


def test_sampling_counts_proportional_to_area():
    # two triangles with area ratio 4:1; binomial 99% bounds
    v = np.array([[0, 0, 0], [4, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0.0]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    pos, _ = sample_point_cloud(mesh, 2000.0, seed=7)
    n = len(pos)
    frac_big = float(np.mean(pos[:, 0] < 8))
    p = 0.8
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(frac_big - p) < 2.58 * sigma


def test_sampling_deterministic():
    pos1, _ = sample_point_cloud(floor_mesh(), 50, seed=3)
    pos2, _ = sample_point_cloud(floor_mesh(), 50, seed=3)
    np.testing.assert_array_equal(pos1, pos2)


# ---------------------------------------------------------------------------
# assets
# ---------------------------------------------------------------------------

def test_asset_invariants():
    with pytest.raises(ValidationError):
        Asset(mesh=Obb(vec3(0.5, 0, 0), vec3(0.5, 0.5, 0.5)).to_mesh(),
              extents=vec3(1, 1, 1), asset_id="offcenter")
    with pytest.raises(ValidationError):
        Asset(mesh=Obb(vec3(0, 0, 0), vec3(0.5, 0.5, 0.5)).to_mesh(),
              extents=vec3(2, 1, 1), asset_id="wrong-extents")


def test_asset_save_load_roundtrip_and_reaxing(tmp_path):
    asset = make_box_asset((0.2, 0.4, 0.3), "unit")
    meta = save_asset(asset, tmp_path)
    back = load_asset(tmp_path / "unit.ply", meta)
    np.testing.assert_allclose(back.mesh.vertices, asset.mesh.vertices, atol=1e-12)
    np.testing.assert_array_equal(back.extents, asset.extents)

    # declare the mesh as +x-up / +z-frontal: x' = y, y' = z, z' = x
    mesh_path = tmp_path / "unit.ply"
    sidecar = {"asset_id": "reaxed", "up": "+x", "frontal": "+z", "extents": [0.4, 0.3, 0.2]}
    re_axed = load_asset(mesh_path, sidecar)
    lo, hi = re_axed.mesh.aabb()
    np.testing.assert_allclose(hi - lo, [0.4, 0.3, 0.2], atol=1e-9)
