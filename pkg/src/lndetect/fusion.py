"""Late fusion of the four per-category, per-stream probability volumes.

Each stratification category (tumor-proximal, tumor-distal) has a CT-only
stream and an early-fusion stream.  Within a category the two streams
combine by voxelwise max; the categories then combine over their disjoint
region supports, so every voxel takes exactly one category's max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distance import RegionPartition
from .volume import KIND_PROBABILITY, BinaryMask, VoxelGrid, require_same_geometry


@dataclass(frozen=True)
class StreamSet:
    """The four stream predictions plus the region partition they fuse over."""

    p_ct_prox: VoxelGrid
    p_ef_prox: VoxelGrid
    p_ct_dis: VoxelGrid
    p_ef_dis: VoxelGrid
    partition: RegionPartition

    def __post_init__(self):
        grids = (self.p_ct_prox, self.p_ef_prox, self.p_ct_dis, self.p_ef_dis)
        for g in grids:
            if g.kind != KIND_PROBABILITY:
                raise ValueError(f"stream grids must be probability kind, got {g.kind!r}")
        require_same_geometry(*grids, self.partition.proximal)


def fuse_category(p_ct: VoxelGrid, p_ef: VoxelGrid) -> VoxelGrid:
    """Voxelwise maximum of the two streams of one category."""
    require_same_geometry(p_ct, p_ef)
    return VoxelGrid(
        np.maximum(p_ct.values, p_ef.values), p_ct.spacing, p_ct.origin, KIND_PROBABILITY
    )


def restrict_to_region(p: VoxelGrid, region: BinaryMask) -> VoxelGrid:
    """Zero out probabilities outside the region, leave the inside unchanged."""
    require_same_geometry(p, region)
    out = np.where(region.bits, p.values, np.float32(0.0))
    return VoxelGrid(out, p.spacing, p.origin, KIND_PROBABILITY)


def fuse_late(streams: StreamSet) -> VoxelGrid:
    """Late-fusion volume: each region takes the max of its own category's streams."""
    prox = restrict_to_region(
        fuse_category(streams.p_ct_prox, streams.p_ef_prox), streams.partition.proximal
    )
    dis = restrict_to_region(
        fuse_category(streams.p_ct_dis, streams.p_ef_dis), streams.partition.distal
    )
    # regions are disjoint and cover the volume, so max == sum here
    return VoxelGrid(
        np.maximum(prox.values, dis.values),
        prox.spacing,
        prox.origin,
        KIND_PROBABILITY,
    )
