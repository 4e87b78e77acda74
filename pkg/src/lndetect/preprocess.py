"""Physical-space resampling, intensity preprocessing, and tiled inference.

Default preprocessing targets: 1x1x2.5 mm voxels, CT clamped to
[-200, 300] HU, PET z-scored with cohort statistics.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .volume import (
    KIND_CT,
    KIND_GENERIC,
    KIND_PET,
    KIND_PROBABILITY,
    BinaryMask,
    VoxelGrid,
)

DEFAULT_TARGET_SPACING = (1.0, 1.0, 2.5)
DEFAULT_HU_WINDOW = (-200.0, 300.0)
DEFAULT_INFERENCE_WINDOW = (224, 224, 64)  # tiled-inference sub-volume, voxels


def _output_dims(dims, spacing, target_spacing) -> tuple[int, int, int]:
    # round-half-up on in_dim * in_spacing / out_spacing, minimum 1
    out = []
    for d, s, t in zip(dims, spacing, target_spacing):
        out.append(max(1, int(np.floor(d * s / t + 0.5))))
    return tuple(out)


def _axis_coords(n_out: int, scale: float, n_in: int) -> np.ndarray:
    # continuous input index of each output voxel center; origin preserved
    u = np.arange(n_out, dtype=np.float64) * scale
    return np.clip(u, 0.0, n_in - 1)


def _trilinear_gather(vol: np.ndarray, ux, uy, uz) -> np.ndarray:
    """Sample vol (z,y,x) at the outer product of per-axis coordinates."""
    nz, ny, nx = vol.shape
    x0 = np.floor(ux).astype(np.intp)
    y0 = np.floor(uy).astype(np.intp)
    z0 = np.floor(uz).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = (ux - x0).astype(np.float64)
    fy = (uy - y0).astype(np.float64)
    fz = (uz - z0).astype(np.float64)

    fz = fz[:, None, None]
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    z0i, z1i = z0[:, None, None], z1[:, None, None]
    y0i, y1i = y0[None, :, None], y1[None, :, None]
    x0i, x1i = x0[None, None, :], x1[None, None, :]

    v = vol.astype(np.float64)
    c000 = v[z0i, y0i, x0i]
    c001 = v[z0i, y0i, x1i]
    c010 = v[z0i, y1i, x0i]
    c011 = v[z0i, y1i, x1i]
    c100 = v[z1i, y0i, x0i]
    c101 = v[z1i, y0i, x1i]
    c110 = v[z1i, y1i, x0i]
    c111 = v[z1i, y1i, x1i]

    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _nearest_gather(vol: np.ndarray, ux, uy, uz) -> np.ndarray:
    nz, ny, nx = vol.shape
    # half-up rounding, consistent with the output-dims rule
    xi = np.clip(np.floor(ux + 0.5).astype(np.intp), 0, nx - 1)
    yi = np.clip(np.floor(uy + 0.5).astype(np.intp), 0, ny - 1)
    zi = np.clip(np.floor(uz + 0.5).astype(np.intp), 0, nz - 1)
    return vol[zi[:, None, None], yi[None, :, None], xi[None, None, :]]


def resample(
    grid: VoxelGrid | BinaryMask,
    target_spacing: Sequence[float],
    interpolation: str = "trilinear",
) -> VoxelGrid | BinaryMask:
    """Resample onto target_spacing (mm), keeping the first voxel center fixed.

    Scalar grids use trilinear (nearest also allowed); masks must use nearest.
    Output dims are round-half-up of dim*spacing/target, at least 1.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be 3 positive reals, got {target_spacing}")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    is_mask = isinstance(grid, BinaryMask)
    if is_mask and interpolation == "trilinear":
        raise ValueError("masks must be resampled with nearest-neighbor interpolation")

    if target_spacing == grid.spacing:
        return grid

    nx, ny, nz = grid.dims
    ox, oy, oz = _output_dims(grid.dims, grid.spacing, target_spacing)
    sx, sy, sz = grid.spacing
    tx, ty, tz = target_spacing
    ux = _axis_coords(ox, tx / sx, nx)
    uy = _axis_coords(oy, ty / sy, ny)
    uz = _axis_coords(oz, tz / sz, nz)

    if is_mask:
        out = _nearest_gather(grid.bits, ux, uy, uz)
        return BinaryMask(out, target_spacing, grid.origin)
    if interpolation == "nearest":
        out = _nearest_gather(grid.values, ux, uy, uz)
    else:
        out = _trilinear_gather(grid.values, ux, uy, uz)
        if grid.kind == KIND_PROBABILITY:
            out = np.clip(out, 0.0, 1.0)
    return VoxelGrid(out.astype(np.float32), target_spacing, grid.origin, grid.kind)


def truncate_hu(
    grid: VoxelGrid,
    lo: float = DEFAULT_HU_WINDOW[0],
    hi: float = DEFAULT_HU_WINDOW[1],
) -> VoxelGrid:
    """Clamp CT intensities into [lo, hi] HU."""
    if grid.kind != KIND_CT:
        raise ValueError(f"truncate_hu expects a ct-hu grid, got kind {grid.kind!r}")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    return grid.with_values(np.clip(grid.values, lo, hi))


def normalize_pet(grid: VoxelGrid, cohort_mean: float, cohort_std: float) -> VoxelGrid:
    """Z-score PET intensities with cohort statistics; output kind is generic."""
    if grid.kind not in (KIND_PET, KIND_GENERIC):
        raise ValueError(f"normalize_pet expects a pet-suv grid, got kind {grid.kind!r}")
    if not cohort_std > 0:
        raise ValueError(f"cohort std must be positive, got {cohort_std}")
    out = (grid.values.astype(np.float64) - cohort_mean) / cohort_std
    return VoxelGrid(out.astype(np.float32), grid.spacing, grid.origin, KIND_GENERIC)


def compute_cohort_stats(
    grids: Sequence[VoxelGrid],
    foreground_masks: Sequence[BinaryMask] | None = None,
) -> tuple[float, float]:
    """Pooled mean and population std over every voxel of every grid.

    Optional per-grid foreground masks restrict the statistics (e.g. to
    exclude background air).  Two streaming passes; never concatenates
    the cohort in memory.
    """
    if len(grids) == 0:
        raise ValueError("cohort must contain at least one grid")
    if foreground_masks is not None and len(foreground_masks) != len(grids):
        raise ValueError("need one foreground mask per grid")

    def voxels(i):
        v = grids[i].values.astype(np.float64)
        if foreground_masks is not None:
            return v[foreground_masks[i].bits]
        return v.ravel()

    count = 0
    total = 0.0
    for i in range(len(grids)):
        v = voxels(i)
        count += v.size
        total += float(v.sum())
    if count < 2:
        raise ValueError(f"cohort must contain at least 2 voxels, got {count}")
    mean = total / count
    ssq = 0.0
    for i in range(len(grids)):
        d = voxels(i) - mean
        ssq += float((d * d).sum())
    return mean, float(np.sqrt(ssq / count))


def _window_starts(dim: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, dim - window + 1, stride))
    if starts[-1] != dim - window:
        starts.append(dim - window)  # final window clamped to the edge
    return starts


def tile_aggregate(
    grid: VoxelGrid,
    window: Sequence[int],
    stride: Sequence[int],
    per_window_fn: Callable[[VoxelGrid], VoxelGrid],
    roi: BinaryMask | None = None,
) -> VoxelGrid:
    """Run per_window_fn over a tiling of the volume and average overlaps.

    Windows of size ``window`` (x, y, z voxels) are placed every ``stride``
    voxels, with the final window along each axis clamped to the volume
    edge, so every voxel is covered at least once.  Overlapping window
    predictions are averaged with equal weight.  When ``roi`` is given the
    tiling covers the ROI bounding box instead of the whole volume;
    uncovered voxels are 0.
    """
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if any(s <= 0 for s in stride):
        raise ValueError(f"stride components must be positive, got {stride}")
    if any(w <= 0 for w in window):
        raise ValueError(f"window components must be positive, got {window}")

    if roi is not None:
        if roi.geometry != grid.geometry:
            raise ValueError("roi geometry must match the grid")
        if not roi.bits.any():
            raise ValueError("roi mask is empty")
        zz, yy, xx = np.nonzero(roi.bits)
        lo = (int(xx.min()), int(yy.min()), int(zz.min()))
        hi = (int(xx.max()) + 1, int(yy.max()) + 1, int(zz.max()) + 1)
    else:
        lo = (0, 0, 0)
        hi = grid.dims

    extent = tuple(h - l for l, h in zip(lo, hi))
    window = tuple(min(w, e) for w, e in zip(window, extent))

    acc = np.zeros(grid.values.shape, dtype=np.float64)
    cnt = np.zeros(grid.values.shape, dtype=np.int32)
    xs = [lo[0] + s for s in _window_starts(extent[0], window[0], stride[0])]
    ys = [lo[1] + s for s in _window_starts(extent[1], window[1], stride[1])]
    zs = [lo[2] + s for s in _window_starts(extent[2], window[2], stride[2])]
    wx, wy, wz = window
    for z0 in zs:
        for y0 in ys:
            for x0 in xs:
                sub = grid.values[z0 : z0 + wz, y0 : y0 + wy, x0 : x0 + wx]
                win = VoxelGrid(sub, grid.spacing, grid.origin, grid.kind)
                pred = per_window_fn(win)
                if not isinstance(pred, VoxelGrid) or pred.kind != KIND_PROBABILITY:
                    raise ValueError("per_window_fn must return a probability VoxelGrid")
                if pred.values.shape != sub.shape:
                    raise ValueError(
                        f"per_window_fn returned shape {pred.values.shape}, "
                        f"expected {sub.shape}"
                    )
                acc[z0 : z0 + wz, y0 : y0 + wy, x0 : x0 + wx] += pred.values
                cnt[z0 : z0 + wz, y0 : y0 + wy, x0 : x0 + wx] += 1
    out = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return VoxelGrid(out.astype(np.float32), grid.spacing, grid.origin, KIND_PROBABILITY)
