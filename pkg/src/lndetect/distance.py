"""Signed Euclidean distance from the tumor boundary, and distance stratification.

The distance field is measured voxel-center to voxel-center against the
tumor's surface voxels (tumor voxels with at least one face neighbor
outside the mask).  Values are negative strictly inside the tumor, zero on
the surface voxels themselves, positive outside, in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import edt_squared
from .volume import KIND_DISTANCE, BinaryMask, VoxelGrid, require_same_geometry

DEFAULT_PROXIMAL_DISTANCE_MM = 70.0


@dataclass(frozen=True)
class SignedDistanceMap:
    """Signed distance field plus the size of the boundary set it was built from."""

    grid: VoxelGrid
    source_boundary_count: int

    def __post_init__(self):
        if self.grid.kind != KIND_DISTANCE:
            raise ValueError(f"distance map grid must be kind distance-mm, got {self.grid.kind!r}")
        if self.source_boundary_count <= 0:
            raise ValueError("boundary set must be non-empty")

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def geometry(self):
        return self.grid.geometry


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint tumor-proximal / tumor-distal masks covering the whole volume."""

    proximal: BinaryMask
    distal: BinaryMask
    threshold_d: float

    def __post_init__(self):
        require_same_geometry(self.proximal, self.distal)
        both = self.proximal.bits & self.distal.bits
        neither = ~(self.proximal.bits | self.distal.bits)
        if both.any() or neither.any():
            raise ValueError("proximal/distal masks must partition the volume")


def boundary_bits(tumor: BinaryMask) -> np.ndarray:
    """Boolean array marking tumor voxels with a 6-neighbor outside the mask.

    Tumor voxels on the volume edge count as boundary.
    """
    inside = tumor.bits
    if not inside.any():
        raise ValueError("tumor mask is empty")
    padded = np.pad(inside, 1, constant_values=False)
    all_neighbors_inside = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return inside & ~all_neighbors_inside


def extract_boundary(tumor: BinaryMask) -> np.ndarray:
    """Sorted x-fastest linear indices of the tumor's surface voxels."""
    return np.flatnonzero(boundary_bits(tumor).ravel())


def signed_edt(tumor: BinaryMask) -> SignedDistanceMap:
    """Exact signed Euclidean distance to the tumor surface, honoring spacing."""
    bnd = boundary_bits(tumor)
    count = int(bnd.sum())
    sq = edt_squared(bnd, tumor.spacing)
    dist = np.sqrt(sq)
    dist[tumor.bits] *= -1.0
    dist[dist == 0.0] = 0.0  # normalize -0.0 on the boundary shell
    grid = VoxelGrid(dist.astype(np.float32), tumor.spacing, tumor.origin, KIND_DISTANCE)
    return SignedDistanceMap(grid, count)


def stratify(dmap: SignedDistanceMap, d: float = DEFAULT_PROXIMAL_DISTANCE_MM) -> RegionPartition:
    """Split the volume at distance ``d``: proximal iff value <= d (inclusive).

    Tumor-interior voxels (negative distances) are always proximal.
    """
    if np.isnan(d):
        raise ValueError("stratification threshold must not be NaN")
    prox = dmap.values <= d
    spacing, origin = dmap.grid.spacing, dmap.grid.origin
    return RegionPartition(
        proximal=BinaryMask(prox, spacing, origin),
        distal=BinaryMask(~prox, spacing, origin),
        threshold_d=float(d),
    )
