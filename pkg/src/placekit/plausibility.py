"""Layered heightmaps and the dense physical-validity grid.

The scene is ray cast from above on a cell grid; per cell the sorted
intersection heights form layers (layer 0 is the lowest surface). Placement
validity at a (cell, layer, rotation bin) requires the support patch under
the asset footprint to be nearly flat and the asset to fit below the next
surface. Cells sample their centers with a half-open boundary convention so
an axis-aligned box of size k*cell covers exactly k cells.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .geometry import TriangleMesh, rot_z
from .scene import Asset

DEFAULT_CELL_SIZE = 0.025
MAX_LAYERS = 8
# distinct intersections closer than this merge into one surface
_DEDUPE_TOL = 1e-6

ROTATION_BINS = 8
BIN_CENTERS = np.arange(ROTATION_BINS) * (2.0 * math.pi / ROTATION_BINS)


def rasterize_columns(tri_verts: np.ndarray, origin, cell_size: float, dims):
    """Vertical down-ray hits of triangles on a cell grid.

    Returns (flat_cell_index, z, up_facing) arrays, unsorted. A hit is
    up-facing when the triangle's normal points upward (free space above the
    surface). Sample points sit at cell centers nudged by +cell*1e-6 so
    geometry edges lying exactly on cell boundaries resolve half-open.
    """
    nx, ny = dims
    ox, oy = float(origin[0]), float(origin[1])
    delta = cell_size * 1e-6
    out_idx = []
    out_z = []
    out_up = []
    for tri in tri_verts:
        p = tri[:, :2]
        denom = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if abs(denom) < 1e-14:
            continue  # vertical or degenerate triangle: no down-ray area
        min_x, min_y = p.min(axis=0)
        max_x, max_y = p.max(axis=0)
        ix0 = max(0, int(math.floor((min_x - ox) / cell_size - 0.5)) - 1)
        ix1 = min(nx - 1, int(math.ceil((max_x - ox) / cell_size)) + 1)
        iy0 = max(0, int(math.floor((min_y - oy) / cell_size - 0.5)) - 1)
        iy1 = min(ny - 1, int(math.ceil((max_y - oy) / cell_size)) + 1)
        if ix0 > ix1 or iy0 > iy1:
            continue
        xs = ox + (np.arange(ix0, ix1 + 1) + 0.5) * cell_size + delta
        ys = oy + (np.arange(iy0, iy1 + 1) + 0.5) * cell_size + delta
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        w0 = (p[1, 0] - gx) * (p[2, 1] - gy) - (p[1, 1] - gy) * (p[2, 0] - gx)
        w1 = (p[2, 0] - gx) * (p[0, 1] - gy) - (p[2, 1] - gy) * (p[0, 0] - gx)
        w2 = denom - w0 - w1
        eps = 1e-9 * abs(denom)
        if denom > 0:
            inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        else:
            inside = (w0 <= eps) & (w1 <= eps) & (w2 <= eps)
        if not inside.any():
            continue
        u = w0 / denom
        v = w1 / denom
        w = 1.0 - u - v
        z = u[inside] * tri[0, 2] + v[inside] * tri[1, 2] + w[inside] * tri[2, 2]
        ii, jj = np.nonzero(inside)
        out_idx.append((ii + ix0) * ny + (jj + iy0))
        out_z.append(z)
        out_up.append(np.full(len(z), denom > 0))
    if not out_idx:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=bool)
    return np.concatenate(out_idx), np.concatenate(out_z), np.concatenate(out_up)


def rasterize_coverage(tri_verts: np.ndarray, origin, cell_size: float, dims):
    """Cells overlapped by any triangle's xy projection (exact, conservative).

    Separating-axis test between each triangle and each cell square; a cell
    touched anywhere counts. Returns (flat_cell_index, tri_zmax) with one row
    per (cell, triangle) coverage, suitable for a per-cell max reduction.
    """
    nx, ny = dims
    ox, oy = float(origin[0]), float(origin[1])
    half = cell_size / 2.0
    out_idx = []
    out_z = []
    for tri in tri_verts:
        p = tri[:, :2]
        denom = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if abs(denom) < 1e-14:
            continue
        if denom < 0:
            p = p[::-1]  # make CCW
        min_x, min_y = p.min(axis=0)
        max_x, max_y = p.max(axis=0)
        ix0 = max(0, int(math.floor((min_x - ox) / cell_size)))
        ix1 = min(nx - 1, int(math.floor((max_x - ox) / cell_size + 1e-12)))
        iy0 = max(0, int(math.floor((min_y - oy) / cell_size)))
        iy1 = min(ny - 1, int(math.floor((max_y - oy) / cell_size + 1e-12)))
        if ix0 > ix1 or iy0 > iy1:
            continue
        cx = ox + (np.arange(ix0, ix1 + 1) + 0.5) * cell_size
        cy = oy + (np.arange(iy0, iy1 + 1) + 0.5) * cell_size
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        covered = np.ones(gx.shape, dtype=bool)
        for i in range(3):
            a = p[i]
            b = p[(i + 1) % 3]
            ex, ey = b[0] - a[0], b[1] - a[1]
            e_center = ex * (gy - a[1]) - ey * (gx - a[0])
            slack = (abs(ex) + abs(ey)) * half
            covered &= e_center + slack >= -1e-12
        if not covered.any():
            continue
        ii, jj = np.nonzero(covered)
        flat = (ii + ix0) * ny + (jj + iy0)
        out_idx.append(flat)
        out_z.append(np.full(len(flat), tri[:, 2].max()))
    if not out_idx:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(out_idx), np.concatenate(out_z)


@dataclass(eq=False)
class HeightmapStack:
    """Per-cell layered surface heights; NaN marks cells no ray ever hit.

    ``heights[:, :, l]`` is padded: cells with fewer than l+1 real hits repeat
    their highest surface. ``hit_counts`` says how many layers are real.
    ``up_facing`` marks layers whose surface has free space above it; only
    those can host a placement (the underside of a slab cannot).
    """

    origin: np.ndarray  # (2,) world xy of the grid corner
    cell_size: float
    heights: np.ndarray  # (nx, ny, L)
    hit_counts: np.ndarray  # (nx, ny)
    up_facing: np.ndarray  # (nx, ny, L) bool

    @property
    def dims(self) -> tuple[int, int]:
        return self.heights.shape[0], self.heights.shape[1]

    @property
    def num_layers(self) -> int:
        return self.heights.shape[2]

    def cell_center(self, ix, iy):
        return (self.origin[0] + (ix + 0.5) * self.cell_size,
                self.origin[1] + (iy + 0.5) * self.cell_size)

    def world_to_cell(self, points_xy: np.ndarray):
        rel = (np.atleast_2d(points_xy) - self.origin[None, :]) / self.cell_size
        idx = np.floor(rel).astype(np.int64)
        return idx[:, 0], idx[:, 1]


def build_heightmap_stack(mesh: TriangleMesh, cell_size: float = DEFAULT_CELL_SIZE,
                          max_layers: int = MAX_LAYERS) -> HeightmapStack:
    """Cast one vertical ray per cell and layer the intersection heights."""
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    lo, hi = mesh.aabb()
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / cell_size)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / cell_size)))
    origin = np.array([lo[0], lo[1]])
    idx, z, up = rasterize_columns(mesh.triangle_vertices(), origin, cell_size, (nx, ny))
    if len(idx) == 0:
        raise ValidationError("mesh has no downward-facing surface area")
    # ascending height; at equal heights the up-facing surface sorts first so a
    # slab bottom coincident above a floor yields zero clearance
    order = np.lexsort((~up, z, idx))
    idx, z, up = idx[order], z[order], up[order]
    same = idx[1:] == idx[:-1]
    close = np.abs(z[1:] - z[:-1]) <= _DEDUPE_TOL
    same_orient = up[1:] == up[:-1]
    keep = np.concatenate([[True], ~(same & close & same_orient)])
    idx, z, up = idx[keep], z[keep], up[keep]
    counts = np.bincount(idx, minlength=nx * ny)
    deepest = int(counts.max())
    if deepest > max_layers:
        warnings.warn(f"heightmap stack truncated from {deepest} to {max_layers} layers")
    num_layers = min(deepest, max_layers)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(idx)) - starts[idx]
    sel = rank < num_layers
    heights = np.full((nx * ny, num_layers), np.nan)
    up_facing = np.zeros((nx * ny, num_layers), dtype=bool)
    heights[idx[sel], rank[sel]] = z[sel]
    up_facing[idx[sel], rank[sel]] = up[sel]
    for l in range(1, num_layers):
        gap = np.isnan(heights[:, l]) & ~np.isnan(heights[:, l - 1])
        heights[gap, l] = heights[gap, l - 1]
    return HeightmapStack(
        origin=origin,
        cell_size=cell_size,
        heights=heights.reshape(nx, ny, num_layers),
        hit_counts=np.minimum(counts, num_layers).reshape(nx, ny),
        up_facing=up_facing.reshape(nx, ny, num_layers),
    )


@dataclass(eq=False)
class AssetFootprint:
    """Per rotation bin: occupied cells and column heights of the asset.

    Offsets are relative to the asset center cell; arrays are (2k+1, 2k+1)
    with the center at index k. Column heights are measured from the asset's
    bottom plane.
    """

    cell_size: float
    radius: int
    occupied: np.ndarray  # (8, 2k+1, 2k+1) bool
    col_heights: np.ndarray  # (8, 2k+1, 2k+1), NaN outside the footprint
    height: float

    def bbox_cells(self, bin_index: int) -> tuple[int, int, int, int]:
        """Occupied-cell bounds (ix0, ix1, iy0, iy1) as offsets from center."""
        occ = self.occupied[bin_index]
        ii, jj = np.nonzero(occ)
        k = self.radius
        return int(ii.min()) - k, int(ii.max()) - k, int(jj.min()) - k, int(jj.max()) - k


def compute_asset_footprints(asset: Asset, cell_size: float = DEFAULT_CELL_SIZE,
                             conservative: bool = False) -> AssetFootprint:
    """Rasterize the asset from above at the 8 bin-center yaw angles.

    Default sampling hits cell centers (half-open: a box of size k*cell spans
    exactly k cells). ``conservative=True`` instead marks every cell the
    projection touches at all, so a placement validated through it can never
    protrude past a checked cell; column heights then use each triangle's max
    height (exact for flat-topped assets).
    """
    if cell_size <= 0:
        raise ValidationError("cell_size must be positive")
    k = int(math.ceil(math.hypot(asset.extents[0], asset.extents[1]) / 2.0 / cell_size)) + 1
    n = 2 * k + 1
    occupied = np.zeros((ROTATION_BINS, n, n), dtype=bool)
    cols = np.full((ROTATION_BINS, n, n), np.nan)
    half_h = asset.extents[2] / 2.0
    origin = np.array([-(k + 0.5) * cell_size, -(k + 0.5) * cell_size])
    for b, yaw in enumerate(BIN_CENTERS):
        tv = asset.mesh.transformed(rot_z(yaw)).triangle_vertices()
        if conservative:
            idx, z = rasterize_coverage(tv, origin, cell_size, (n, n))
        else:
            idx, z, _up = rasterize_columns(tv, origin, cell_size, (n, n))
        if len(idx) == 0:
            raise ValidationError("asset has no top-down footprint")
        top = np.full(n * n, -np.inf)
        np.maximum.at(top, idx, z)
        hit = np.isfinite(top)
        occupied[b] = hit.reshape(n, n)
        col = np.where(hit, top + half_h, np.nan)  # height above the asset bottom
        cols[b] = col.reshape(n, n)
    return AssetFootprint(cell_size=cell_size, radius=k, occupied=occupied,
                          col_heights=cols, height=float(asset.extents[2]))


def dilate_footprint(fp: AssetFootprint) -> AssetFootprint:
    """Grow every bin's occupancy by a one-cell ring (column height 0 there).

    Used by mask generation: grid validity is computed at cell centers but
    transferred to arbitrary points inside the cell, so the checked patch
    must cover the footprint at any sub-cell offset.
    """
    k = fp.radius + 1
    n = 2 * k + 1
    occupied = np.zeros((ROTATION_BINS, n, n), dtype=bool)
    cols = np.full((ROTATION_BINS, n, n), np.nan)
    occupied[:, 1:-1, 1:-1] = fp.occupied
    cols[:, 1:-1, 1:-1] = fp.col_heights
    grown = occupied.copy()
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            grown |= np.roll(np.roll(occupied, dx, axis=1), dy, axis=2)
    ring = grown & ~occupied
    cols[ring] = 0.0
    return AssetFootprint(cell_size=fp.cell_size, radius=k, occupied=grown,
                          col_heights=cols, height=fp.height)


@dataclass(eq=False)
class PhysicalGrid:
    """Validity per (cell, layer, rotation bin) plus its generating stack."""

    valid: np.ndarray  # (nx, ny, L, 8) bool
    stack: HeightmapStack
    footprint: AssetFootprint


def compute_physical_grid(stack: HeightmapStack, fp: AssetFootprint,
                          range_tol: float = 0.10) -> PhysicalGrid:
    """Flat-patch and z-clearance tests for every cell, layer, and bin.

    A placement at (cell, layer, bin) is valid when the layer is a real
    up-facing surface, the footprint-masked patch of padded layer heights
    spans at most ``range_tol`` and, resting on the patch maximum, every
    asset column stays strictly below that column's next surface of any
    orientation. Padded (repeated) layers are not placement layers
    themselves; beyond the last real surface there is open sky.
    """
    if abs(fp.cell_size - stack.cell_size) > 1e-12:
        raise ValidationError("footprint and stack cell sizes differ")
    nx, ny = stack.dims
    num_layers = stack.num_layers
    valid = np.zeros((nx, ny, num_layers, ROTATION_BINS), dtype=bool)
    if fp.occupied.shape[1] > nx or fp.occupied.shape[1] > ny:
        warnings.warn("asset footprint larger than the scene grid; nothing is valid")
        return PhysicalGrid(valid=valid, stack=stack, footprint=fp)
    hits = stack.hit_counts
    for l in range(num_layers):
        h = stack.heights[:, :, l]
        h_max_in = np.where(np.isnan(h), np.inf, h)
        h_min_in = np.where(np.isnan(h), -np.inf, h)
        if l + 1 < num_layers:
            next_h = np.where(hits > l + 1, stack.heights[:, :, l + 1], np.inf)
        else:
            next_h = np.full((nx, ny), np.inf)
        real = (hits > l) & stack.up_facing[:, :, l]
        for b in range(ROTATION_BINS):
            mask = fp.occupied[b]
            support = ndimage.maximum_filter(h_max_in, footprint=mask,
                                             mode="constant", cval=np.inf)
            low = ndimage.minimum_filter(h_min_in, footprint=mask,
                                         mode="constant", cval=-np.inf)
            with np.errstate(invalid="ignore"):
                range_ok = (support - low) <= range_tol
            structure = np.where(mask, fp.col_heights[b], 0.0)
            clearance = ndimage.grey_erosion(next_h, footprint=mask, structure=structure,
                                             mode="constant", cval=np.inf)
            with np.errstate(invalid="ignore"):
                fit_ok = clearance > support
            valid[:, :, l, b] = real & range_ok & fit_ok
    return PhysicalGrid(valid=valid, stack=stack, footprint=fp)


def support_heights(grid: PhysicalGrid) -> np.ndarray:
    """(nx, ny, L, 8) patch-max support height per cell/layer/bin (inf where
    undefined). The asset bottom rests here when placed at that cell."""
    stack = grid.stack
    nx, ny = stack.dims
    out = np.full((nx, ny, stack.num_layers, ROTATION_BINS), np.inf)
    for l in range(stack.num_layers):
        h = stack.heights[:, :, l]
        h_max_in = np.where(np.isnan(h), np.inf, h)
        for b in range(ROTATION_BINS):
            out[:, :, l, b] = ndimage.maximum_filter(
                h_max_in, footprint=grid.footprint.occupied[b], mode="constant", cval=np.inf)
    return out


# ---------------------------------------------------------------------------
# Point transfer
# ---------------------------------------------------------------------------

def point_transfer(stack: HeightmapStack, points: np.ndarray,
                   z_tol_factor: float = 2.0):
    """Map each point to its cell and nearest real layer.

    Returns (ix, iy, layer) with layer = -1 when no layer height lies within
    ``z_tol_factor * cell_size`` of the point (wall points, out-of-grid points).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    ix, iy = stack.world_to_cell(pts[:, :2])
    nx, ny = stack.dims
    in_grid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    layer = np.full(n, -1, dtype=np.int64)
    gx = np.clip(ix, 0, nx - 1)
    gy = np.clip(iy, 0, ny - 1)
    h = stack.heights[gx, gy, :]  # (n, L)
    counts = stack.hit_counts[gx, gy]
    l_idx = np.arange(stack.num_layers)[None, :]
    dist = np.abs(h - pts[:, 2][:, None])
    dist = np.where(l_idx < counts[:, None], dist, np.inf)
    dist = np.where(np.isnan(dist), np.inf, dist)
    best = np.argmin(dist, axis=1)
    best_d = dist[np.arange(n), best]
    ok = in_grid & (best_d <= z_tol_factor * stack.cell_size)
    layer[ok] = best[ok]
    return ix, iy, layer


def grid_point_labels(grid: PhysicalGrid, points: np.ndarray):
    """Per-point validity bit and rotation byte from the nearest grid entry."""
    stack = grid.stack
    ix, iy, layer = point_transfer(stack, points)
    n = len(points)
    rotations = np.zeros(n, dtype=np.uint8)
    mapped = layer >= 0
    if np.any(mapped):
        bits = grid.valid[ix[mapped], iy[mapped], layer[mapped], :]  # (m, 8)
        rotations[mapped] = bits @ (1 << np.arange(ROTATION_BINS, dtype=np.uint8)).astype(np.uint8)
    validity = rotations != 0
    return validity, rotations


# ---------------------------------------------------------------------------
# Debug export
# ---------------------------------------------------------------------------

def export_grid_slices(grid: PhysicalGrid, out_dir) -> None:
    """Height CSVs and validity PGMs per layer for inspection."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stack = grid.stack
    for l in range(stack.num_layers):
        np.savetxt(out / f"heights_l{l}.csv", stack.heights[:, :, l], delimiter=",", fmt="%.6f")
        any_bin = grid.valid[:, :, l, :].any(axis=2)
        img = (any_bin.T.astype(np.uint8)) * 255
        with open(out / f"valid_l{l}.pgm", "wb") as f:
            f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            f.write(img.tobytes())
