"""Numba kernels: exact squared EDT passes and connected-component labeling.

The EDT uses the dimension-wise lower-envelope-of-parabolas transform, one
pass per axis, which is exact and linear in the voxel count.  Unreached
voxels carry ``BIG`` between passes; any finite parabola always dominates
a BIG one, so the envelope stays correct in mixed rows.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BIG = 1e30
_INF = np.inf


@njit(cache=True)
def _edt_pass_rows(f, s2):
    """One squared-EDT pass along the last axis of a (rows, n) float64 array."""
    rows, n = f.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    d = np.empty(n, dtype=np.float64)
    inv = 1.0 / (2.0 * s2)
    for r in range(rows):
        k = 0
        v[0] = 0
        z[0] = -_INF
        z[1] = _INF
        for q in range(1, n):
            fq = f[r, q] + s2 * q * q
            p = v[k]
            s = (fq - (f[r, p] + s2 * p * p)) * inv / (q - p)
            while s <= z[k]:
                k -= 1
                p = v[k]
                s = (fq - (f[r, p] + s2 * p * p)) * inv / (q - p)
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = _INF
        k = 0
        for x in range(n):
            while z[k + 1] < x:
                k += 1
            p = v[k]
            d[x] = s2 * (x - p) * (x - p) + f[r, p]
        for x in range(n):
            f[r, x] = d[x]


def edt_squared(seeds: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) to the True voxels of ``seeds``.

    ``seeds`` is a (nz, ny, nx) boolean array with at least one True voxel;
    ``spacing`` is (sx, sy, sz) in mm.
    """
    nz, ny, nx = seeds.shape
    sx, sy, sz = (float(s) for s in spacing)
    f = np.where(seeds, 0.0, BIG)

    _edt_pass_rows(f.reshape(nz * ny, nx), sx * sx)
    f = np.ascontiguousarray(f.transpose(0, 2, 1))  # (z, x, y)
    _edt_pass_rows(f.reshape(nz * nx, ny), sy * sy)
    f = np.ascontiguousarray(f.transpose(0, 2, 1))  # (z, y, x)
    f = np.ascontiguousarray(f.transpose(1, 2, 0))  # (y, x, z)
    _edt_pass_rows(f.reshape(ny * nx, nz), sz * sz)
    return np.ascontiguousarray(f.transpose(2, 0, 1))


@njit(cache=True)
def _label_components(mask, offsets, labels):
    """Label connected True voxels of ``mask`` by depth-first flood fill.

    Components are numbered 0..count-1 in raster-scan discovery order, so
    component k's smallest x-fastest linear index is increasing in k.
    """
    nz, ny, nx = mask.shape
    stack = np.empty(nz * ny * nx, dtype=np.int64)
    n_off = offsets.shape[0]
    count = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[z, y, x] and labels[z, y, x] < 0:
                    labels[z, y, x] = count
                    stack[0] = (z * ny + y) * nx + x
                    top = 1
                    while top > 0:
                        top -= 1
                        lin = stack[top]
                        cz = lin // (ny * nx)
                        rem = lin - cz * ny * nx
                        cy = rem // nx
                        cx = rem - cy * nx
                        for k in range(n_off):
                            vz = cz + offsets[k, 0]
                            vy = cy + offsets[k, 1]
                            vx = cx + offsets[k, 2]
                            if 0 <= vz < nz and 0 <= vy < ny and 0 <= vx < nx:
                                if mask[vz, vy, vx] and labels[vz, vy, vx] < 0:
                                    labels[vz, vy, vx] = count
                                    stack[top] = (vz * ny + vy) * nx + vx
                                    top += 1
                    count += 1
    return count


def warmup() -> None:
    """Force JIT compilation of the kernels on a tiny input."""
    seeds = np.zeros((3, 3, 3), dtype=bool)
    seeds[1, 1, 1] = True
    edt_squared(seeds, (1.0, 1.0, 1.0))
    labels = np.full((3, 3, 3), -1, dtype=np.int32)
    offs = np.array([[0, 0, 1], [0, 0, -1]], dtype=np.int64)
    _label_components(seeds, offs, labels)
