import math
import warnings

import numpy as np
import pytest

from placekit.errors import ValidationError
from placekit.geometry import Obb, TriangleMesh, vec3
from placekit.plausibility import (
    BIN_CENTERS,
    build_heightmap_stack,
    compute_asset_footprints,
    compute_physical_grid,
    export_grid_slices,
    grid_point_labels,
    point_transfer,
    support_heights,
)
from placekit.synth import (
    FurnitureItem,
    SynthSceneSpec,
    generate_synthetic_scene,
    make_box_asset,
    make_lshape_asset,
)

import oracles


def floor_quad(x0=0.0, x1=4.0, y0=0.0, y1=4.0, z=0.0):
    v = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def oracle_layers(mesh, x, y, dedupe=1e-6):
    """Brute-force layered heights at one column via per-triangle solves."""
    lo, hi = mesh.aabb()
    origin = np.array([x, y, hi[2] + 1.0])
    t, ids = oracles.brute_raycast(mesh, origin, np.array([0.0, 0.0, -1.0]))
    z = origin[2] - t
    tv = mesh.triangle_vertices()[ids]
    n_z = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])[:, 2]
    order = np.lexsort((n_z < 0, z))
    z, up = z[order], (n_z > 0)[order]
    out = []
    for zz, uu in zip(z, up):
        if out and abs(out[-1][0] - zz) <= dedupe and out[-1][1] == uu:
            continue
        out.append((zz, uu))
    return out


# ---------------------------------------------------------------------------
# heightmap stack
# ---------------------------------------------------------------------------

def test_flat_floor_single_layer():
    stack = build_heightmap_stack(floor_quad(), 0.025)
    assert stack.num_layers == 1
    assert stack.dims == (160, 160)
    assert np.all(stack.hit_counts == 1)
    assert np.allclose(stack.heights[:, :, 0], 0.0)
    assert stack.up_facing.all()


def test_floor_plus_table_top_layers():
    # 3 cm slab at z in [0.72, 0.75]: cells under it get layers (0, 0.72, 0.75)
    slab = Obb(vec3(2.0, 2.0, 0.735), vec3(0.4, 0.3, 0.015)).to_mesh()
    mesh = TriangleMesh.concatenate([floor_quad(), slab])
    stack = build_heightmap_stack(mesh, 0.025)
    ix, iy = stack.world_to_cell(np.array([[2.0, 2.0]]))
    h = stack.heights[ix[0], iy[0]]
    np.testing.assert_allclose(h, [0.0, 0.72, 0.75], atol=1e-9)
    assert list(stack.up_facing[ix[0], iy[0]]) == [True, False, True]
    # off-slab cells keep one layer, padded upward
    jx, jy = stack.world_to_cell(np.array([[0.5, 0.5]]))
    assert stack.hit_counts[jx[0], jy[0]] == 1
    np.testing.assert_allclose(stack.heights[jx[0], jy[0]], 0.0)


def test_stack_matches_per_ray_oracle():
    rng = np.random.default_rng(31)
    for seed in range(5):
        spec = SynthSceneSpec(
            scene_id=f"o{seed}", room=(3.5, 3.5), point_density=10, seed=seed,
            furniture=[FurnitureItem("table", (0.9, 0.7, 0.7), position=(1.6, 1.6)),
                       FurnitureItem("chair", (0.4, 0.4, 0.8), position=(2.6, 2.4), yaw=0.7)])
        scene = generate_synthetic_scene(spec)
        stack = build_heightmap_stack(scene.mesh, 0.05)
        nx, ny = stack.dims
        for _ in range(40):
            ix = int(rng.integers(0, nx))
            iy = int(rng.integers(0, ny))
            cx, cy = stack.cell_center(ix, iy)
            ref = oracle_layers(scene.mesh, cx + 0.05 * 1e-6, cy + 0.05 * 1e-6)
            n = stack.hit_counts[ix, iy]
            assert n == len(ref), (ix, iy, ref, stack.heights[ix, iy])
            for l, (zz, uu) in enumerate(ref):
                assert stack.heights[ix, iy, l] == pytest.approx(zz, abs=1e-9)
                assert stack.up_facing[ix, iy, l] == uu


def test_layer_monotonicity_everywhere():
    spec = SynthSceneSpec(
        scene_id="mono", room=(4, 4), point_density=10, seed=3,
        furniture=[FurnitureItem("table", (1.2, 0.8, 0.7), position=(2, 2)),
                   FurnitureItem("shelf", (0.5, 0.5, 0.3), position=(2, 2), on_top_of=0)])
    stack = build_heightmap_stack(generate_synthetic_scene(spec).mesh, 0.05)
    diffs = np.diff(stack.heights, axis=2)
    assert np.nanmin(diffs) >= 0.0


def test_stack_rejects_bad_input():
    with pytest.raises(ValidationError):
        build_heightmap_stack(floor_quad(), 0.0)
    # all-vertical mesh has no down-ray area
    wall = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1.0]]),
                        np.array([[0, 1, 2], [0, 2, 3]]))
    with pytest.raises(ValidationError):
        build_heightmap_stack(wall, 0.05)


def test_stack_truncation_warns():
    slabs = [floor_quad(z=0.3 * k) for k in range(10)]
    mesh = TriangleMesh.concatenate(slabs)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        stack = build_heightmap_stack(mesh, 0.5)
    assert any("truncated" in str(x.message) for x in w)
    assert stack.num_layers == 8


# ---------------------------------------------------------------------------
# asset footprints
# ---------------------------------------------------------------------------

def test_box_footprint_cell_counts():
    fp = compute_asset_footprints(make_box_asset((0.2, 0.4, 0.3)), 0.025)
    x0, x1, y0, y1 = fp.bbox_cells(0)
    assert (x1 - x0 + 1, y1 - y0 + 1) == (8, 16)
    assert fp.occupied[0].sum() == 8 * 16
    assert np.allclose(fp.col_heights[0][fp.occupied[0]], 0.3)
    assert fp.height == pytest.approx(0.3)


def test_box_footprint_quarter_turn_transposes():
    fp = compute_asset_footprints(make_box_asset((0.2, 0.4, 0.3)), 0.025)
    bx = fp.bbox_cells(0)
    by = fp.bbox_cells(2)
    assert (bx[1] - bx[0], bx[3] - bx[2]) == (by[3] - by[2], by[1] - by[0])


def test_lshape_footprint_matches_column_oracle():
    asset = make_lshape_asset()
    cell = 0.05
    fp = compute_asset_footprints(asset, cell)
    k = fp.radius
    delta = cell * 1e-6
    for b in (0, 1, 3):
        from placekit.geometry import rot_z
        mesh = asset.mesh.transformed(rot_z(BIN_CENTERS[b]))
        for i in range(2 * k + 1):
            for j in range(2 * k + 1):
                x = (i - k) * cell + delta
                y = (j - k) * cell + delta
                t, ids = oracles.brute_raycast(mesh, np.array([x, y, 2.0]), np.array([0, 0, -1.0]))
                assert fp.occupied[b, i, j] == (len(t) > 0)
                if len(t) > 0:
                    top = 2.0 - t.min()
                    assert fp.col_heights[b, i, j] == pytest.approx(
                        top + asset.extents[2] / 2, abs=1e-9)


# ---------------------------------------------------------------------------
# physical grid
# ---------------------------------------------------------------------------

ASSET = make_box_asset((0.3, 0.3, 0.4))


def test_flat_floor_interior_all_valid():
    stack = build_heightmap_stack(floor_quad(), 0.05)
    fp = compute_asset_footprints(ASSET, 0.05)
    grid = compute_physical_grid(stack, fp, 0.10)
    k = fp.radius
    interior = grid.valid[k:-k, k:-k, 0, :]
    assert interior.all()


def test_step_height_rule():
    # two half-floors with a step; footprint patches straddling the step obey
    # the 10 cm range rule
    for step, expect in ((0.12, False), (0.08, True)):
        low = floor_quad(0, 2, 0, 4, 0.0)
        high = floor_quad(2, 4, 0, 4, step)
        mesh = TriangleMesh.concatenate([low, high])
        stack = build_heightmap_stack(mesh, 0.05)
        fp = compute_asset_footprints(ASSET, 0.05)
        grid = compute_physical_grid(stack, fp, 0.10)
        ix, iy = stack.world_to_cell(np.array([[2.0, 2.0]]))
        assert bool(grid.valid[ix[0], iy[0], 0, 0]) == expect


def test_zfit_under_shelf():
    falling = make_box_asset((0.3, 0.3, 0.5))
    for clearance, expect in ((0.4, False), (0.6, True)):
        shelf = Obb(vec3(2, 2, clearance + 0.025), vec3(0.5, 0.5, 0.025)).to_mesh()
        mesh = TriangleMesh.concatenate([floor_quad(), shelf])
        stack = build_heightmap_stack(mesh, 0.05)
        fp = compute_asset_footprints(falling, 0.05)
        grid = compute_physical_grid(stack, fp, 0.10)
        ix, iy = stack.world_to_cell(np.array([[2.0, 2.0]]))
        assert bool(grid.valid[ix[0], iy[0], 0, 0]) == expect


def test_solid_furniture_interior_never_valid():
    spec = SynthSceneSpec(
        scene_id="solid", room=(4, 4), point_density=10, seed=0,
        furniture=[FurnitureItem("table", (1.0, 1.0, 0.75), position=(2, 2))])
    scene = generate_synthetic_scene(spec)
    stack = build_heightmap_stack(scene.mesh, 0.05)
    fp = compute_asset_footprints(make_box_asset((0.2, 0.2, 0.2)), 0.05)
    grid = compute_physical_grid(stack, fp, 0.10)
    ix, iy = stack.world_to_cell(np.array([[2.0, 2.0]]))
    # layers inside the table volume (the floor surface and the coincident
    # table bottom) are never valid for any bin
    heights = stack.heights[ix[0], iy[0]]
    for l, h in enumerate(heights[: stack.hit_counts[ix[0], iy[0]]]):
        if h < 0.7:
            assert not grid.valid[ix[0], iy[0], l, :].any()


def test_validity_antimonotone_in_asset_size():
    spec = SynthSceneSpec(
        scene_id="anti", room=(4, 4), point_density=10, seed=7,
        furniture=[FurnitureItem("table", (1.1, 0.9, 0.72), position=(1.6, 1.5), yaw=0.4),
                   FurnitureItem("chair", (0.5, 0.5, 0.9), position=(3.0, 2.8))])
    scene = generate_synthetic_scene(spec)
    stack = build_heightmap_stack(scene.mesh, 0.05)
    small = compute_physical_grid(stack, compute_asset_footprints(make_box_asset((0.25, 0.35, 0.3)), 0.05), 0.10)
    big = compute_physical_grid(stack, compute_asset_footprints(make_box_asset((0.45, 0.55, 0.6)), 0.05), 0.10)
    assert not np.any(big.valid & ~small.valid)


def test_halving_cell_size_keeps_flat_interior_valid():
    mesh = floor_quad()
    fine = build_heightmap_stack(mesh, 0.025)
    coarse = build_heightmap_stack(mesh, 0.05)
    fp_f = compute_asset_footprints(ASSET, 0.025)
    fp_c = compute_asset_footprints(ASSET, 0.05)
    g_f = compute_physical_grid(fine, fp_f, 0.10)
    g_c = compute_physical_grid(coarse, fp_c, 0.10)
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.uniform([0.5, 0.5], [3.5, 3.5])
        fx, fy = fine.world_to_cell(p[None, :])
        cx, cy = coarse.world_to_cell(p[None, :])
        assert g_c.valid[cx[0], cy[0], 0, 0]
        assert g_f.valid[fx[0], fy[0], 0, 0]


def test_oversized_footprint_warns_all_invalid():
    stack = build_heightmap_stack(floor_quad(0, 0.3, 0, 0.3), 0.05)
    fp = compute_asset_footprints(make_box_asset((1.0, 1.0, 0.3)), 0.05)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        grid = compute_physical_grid(stack, fp, 0.10)
    assert any("footprint larger" in str(x.message) for x in w)
    assert not grid.valid.any()


def test_mismatched_cell_sizes_rejected():
    stack = build_heightmap_stack(floor_quad(), 0.05)
    fp = compute_asset_footprints(ASSET, 0.025)
    with pytest.raises(ValidationError):
        compute_physical_grid(stack, fp, 0.10)


# ---------------------------------------------------------------------------
# point transfer
# ---------------------------------------------------------------------------

def test_point_at_cell_center_inherits_bits():
    stack = build_heightmap_stack(floor_quad(), 0.05)
    fp = compute_asset_footprints(ASSET, 0.05)
    grid = compute_physical_grid(stack, fp, 0.10)
    cx, cy = stack.cell_center(40, 40)
    validity, rotations = grid_point_labels(grid, np.array([[cx, cy, 0.0]]))
    assert validity[0]
    expected = sum(int(grid.valid[40, 40, 0, b]) << b for b in range(8))
    assert rotations[0] == expected


def test_wall_point_gets_invalid():
    spec = SynthSceneSpec(scene_id="w", room=(4, 4), point_density=10, seed=0)
    scene = generate_synthetic_scene(spec)
    stack = build_heightmap_stack(scene.mesh, 0.05)
    fp = compute_asset_footprints(ASSET, 0.05)
    grid = compute_physical_grid(stack, fp, 0.10)
    # a point halfway up a wall has no layer within 2 cells of its height
    validity, rotations = grid_point_labels(grid, np.array([[0.02, 2.0, 1.25]]))
    assert not validity[0]
    assert rotations[0] == 0


def test_transfer_prefers_nearest_layer():
    slab = Obb(vec3(2.0, 2.0, 0.7), vec3(0.5, 0.5, 0.02)).to_mesh()
    mesh = TriangleMesh.concatenate([floor_quad(), slab])
    stack = build_heightmap_stack(mesh, 0.05)
    ix, iy, layer = point_transfer(stack, np.array([[2.0, 2.0, 0.72], [2.0, 2.0, 0.0]]))
    assert stack.heights[ix[0], iy[0], layer[0]] == pytest.approx(0.72)
    assert layer[1] == 0


def test_marked_points_pass_benchmark_checker():
    from placekit.constraints import ThresholdConfig, check_physical
    from placekit.scene import Placement

    cfg = ThresholdConfig()
    rng = np.random.default_rng(11)
    spec = SynthSceneSpec(
        scene_id="agree", room=(4, 4), point_density=60, seed=5,
        furniture=[FurnitureItem("table", (1.0, 0.8, 0.7), position=(1.5, 1.4)),
                   FurnitureItem("chair", (0.4, 0.4, 0.8), position=(3.0, 2.6), yaw=0.5)])
    scene = generate_synthetic_scene(spec)
    stack = build_heightmap_stack(scene.mesh, 0.05)
    fp = compute_asset_footprints(ASSET, 0.05)
    grid = compute_physical_grid(stack, fp, 0.10)
    validity, rotations = grid_point_labels(grid, scene.points)
    marked = np.flatnonzero(validity)
    assert len(marked) > 50
    sample = rng.choice(marked, size=50, replace=False)
    passed = 0
    for i in sample:
        bins = [b for b in range(8) if rotations[i] >> b & 1]
        b = bins[0]
        p = Placement(scene.points[i] + [0, 0, ASSET.extents[2] / 2], BIN_CENTERS[b])
        passed += check_physical(scene, ASSET, p, cfg)
    assert passed / len(sample) >= 0.9  # boundary cells may disagree


def test_export_slices(tmp_path):
    stack = build_heightmap_stack(floor_quad(), 0.1)
    fp = compute_asset_footprints(ASSET, 0.1)
    grid = compute_physical_grid(stack, fp, 0.10)
    export_grid_slices(grid, tmp_path)
    assert (tmp_path / "heights_l0.csv").exists()
    assert (tmp_path / "valid_l0.pgm").exists()


def test_support_heights_match_patch_max():
    slab = Obb(vec3(2.0, 2.0, 0.035), vec3(0.3, 0.3, 0.035)).to_mesh()  # 7 cm bump
    mesh = TriangleMesh.concatenate([floor_quad(), slab])
    stack = build_heightmap_stack(mesh, 0.05)
    fp = compute_asset_footprints(ASSET, 0.05)
    sup = support_heights(compute_physical_grid(stack, fp, 0.10))
    ix, iy = stack.world_to_cell(np.array([[2.0 + 0.2, 2.0]]))  # patch straddles bump edge
    # top layer at that cell: resting on the bump top
    l = stack.hit_counts[ix[0], iy[0]] - 1
    assert sup[ix[0], iy[0], l, 0] == pytest.approx(0.07, abs=1e-9)
