"""Detection instances: binarization, 3D connected components, measurement, CSV I/O.

Candidates are measured in world millimetres: centroid is the mean of
voxel centers, volume is voxel count times voxel volume, and the radius is
the equivalent-sphere radius (3V / 4pi)^(1/3).  Linear voxel indices are
x-fastest (x + nx*y + nx*ny*z).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import _label_components
from .distance import SignedDistanceMap
from .volume import BinaryMask, VoxelGrid, require_same_geometry

DEFAULT_TAU = 0.5
DEFAULT_CONNECTIVITY = 26
DEFAULT_MIN_VOXELS = 8

CANDIDATE_CSV_HEADER = (
    "patient_id,candidate_id,cx_mm,cy_mm,cz_mm,volume_mm3,radius_mm,score,label"
)
GT_CSV_HEADER = "patient_id,gt_id,cx_mm,cy_mm,cz_mm,volume_mm3,radius_mm"


def connectivity_offsets(connectivity: int) -> np.ndarray:
    """(K, 3) neighbor offsets in (dz, dy, dx) order for 6/18/26-connectivity."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                order = abs(dz) + abs(dy) + abs(dx)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dz, dy, dx))
    return np.array(offs, dtype=np.int64)


def equivalent_radius_mm(volume_mm3: float) -> float:
    return float((3.0 * volume_mm3 / (4.0 * np.pi)) ** (1.0 / 3.0))


@dataclass(frozen=True, eq=False)
class InstanceCandidate:
    """One connected detection.  ``voxel_indices`` is None for CSV-loaded rows."""

    id: int
    voxel_indices: np.ndarray | None
    centroid_mm: tuple[float, float, float]
    volume_mm3: float
    radius_mm: float
    score: float
    label: bool | None = None

    def with_score(self, score: float) -> "InstanceCandidate":
        return replace(self, score=float(score))


@dataclass(frozen=True, eq=False)
class GroundTruthInstance:
    id: int
    voxel_indices: np.ndarray | None
    centroid_mm: tuple[float, float, float]
    volume_mm3: float
    radius_mm: float


def binarize(p: VoxelGrid, tau: float = DEFAULT_TAU) -> BinaryMask:
    """Foreground wherever p >= tau (ties count as foreground)."""
    if p.kind != "probability":
        raise ValueError(f"binarize expects a probability grid, got kind {p.kind!r}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return BinaryMask(p.values >= tau, p.spacing, p.origin)


def connected_components(
    mask: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY
) -> list[np.ndarray]:
    """Partition foreground voxels into maximal connected sets.

    Returns sorted linear-index arrays, ordered by each component's
    smallest linear index.
    """
    offs = connectivity_offsets(connectivity)
    bits = mask.bits
    if not bits.any():
        return []
    labels = np.full(bits.shape, -1, dtype=np.int32)
    count = _label_components(bits, offs, labels)
    lin = np.flatnonzero(bits.ravel())
    labs = labels.ravel()[lin]
    order = np.argsort(labs, kind="stable")
    sorted_lin = lin[order]
    bounds = np.searchsorted(labs[order], np.arange(1, count))
    return np.split(sorted_lin, bounds)


def _measure(lin: np.ndarray, geom_like) -> tuple[tuple, float, float]:
    nx, ny, nz = geom_like.dims
    zyx = np.stack(np.unravel_index(lin, (nz, ny, nx)), axis=1)
    centroid = geom_like.world_coords(zyx).mean(axis=0)
    volume = float(lin.size) * geom_like.voxel_volume_mm3
    return tuple(float(c) for c in centroid), volume, equivalent_radius_mm(volume)


def extract_candidates(
    p: VoxelGrid,
    tau: float = DEFAULT_TAU,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_voxels: int = DEFAULT_MIN_VOXELS,
    exclude_interior_of: SignedDistanceMap | None = None,
) -> list[InstanceCandidate]:
    """Threshold, label, filter and measure detection candidates.

    Components smaller than ``min_voxels`` are discarded.  When a signed
    distance map is given, voxels strictly inside the tumor (negative
    distance) are removed from the foreground before labeling.
    """
    fg = binarize(p, tau)
    if exclude_interior_of is not None:
        require_same_geometry(p, exclude_interior_of.grid)
        fg = fg.with_bits(fg.bits & ~(exclude_interior_of.values < 0))
    comps = connected_components(fg, connectivity)
    flat_p = p.values.ravel()
    out = []
    next_id = 1
    for lin in comps:
        if lin.size < min_voxels:
            continue
        centroid, volume, radius = _measure(lin, p)
        out.append(
            InstanceCandidate(
                id=next_id,
                voxel_indices=lin,
                centroid_mm=centroid,
                volume_mm3=volume,
                radius_mm=radius,
                score=float(flat_p[lin].mean(dtype=np.float64)),
            )
        )
        next_id += 1
    return out


def gt_instances(
    y_ln: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY
) -> list[GroundTruthInstance]:
    """Measured instances of a ground-truth mask (no score, no size filter)."""
    out = []
    for i, lin in enumerate(connected_components(y_ln, connectivity), start=1):
        centroid, volume, radius = _measure(lin, y_ln)
        out.append(GroundTruthInstance(i, lin, centroid, volume, radius))
    return out


def rasterize_sphere(
    center_mm, radius_mm: float, geom_like
) -> np.ndarray:
    """Linear indices of voxels whose centers lie within radius_mm of center_mm.

    Used to reconstruct approximate voxel sets for CSV-loaded instances.
    """
    nx, ny, nz = geom_like.dims
    sp = np.asarray(geom_like.spacing)
    org = np.asarray(geom_like.origin)
    c = (np.asarray(center_mm, dtype=np.float64) - org) / sp  # voxel coords
    r_vox = radius_mm / sp
    lo = np.maximum(np.floor(c - r_vox).astype(int), 0)
    hi = np.minimum(np.ceil(c + r_vox).astype(int), np.array([nx, ny, nz]) - 1)
    if np.any(lo > hi):
        return np.empty(0, dtype=np.int64)
    xs = np.arange(lo[0], hi[0] + 1)
    ys = np.arange(lo[1], hi[1] + 1)
    zs = np.arange(lo[2], hi[2] + 1)
    dx = (xs - c[0]) * sp[0]
    dy = (ys - c[1]) * sp[1]
    dz = (zs - c[2]) * sp[2]
    d2 = (
        dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2
    )
    zz, yy, xx = np.nonzero(d2 <= radius_mm * radius_mm)
    lin = (zs[zz] * ny + ys[yy]) * nx + xs[xx]
    return np.sort(lin.astype(np.int64))


# ---------------------------------------------------------------------------
# CSV serialization (UTF-8, '.' decimal, LF line endings)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_candidates_csv(path, per_patient: dict[str, list[InstanceCandidate]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CANDIDATE_CSV_HEADER + "\n")
        for pid, cands in per_patient.items():
            for c in cands:
                label = "" if c.label is None else str(int(c.label))
                cx, cy, cz = c.centroid_mm
                fh.write(
                    f"{pid},{c.id},{_fmt(cx)},{_fmt(cy)},{_fmt(cz)},"
                    f"{_fmt(c.volume_mm3)},{_fmt(c.radius_mm)},{_fmt(c.score)},{label}\n"
                )


def read_candidates_csv(path) -> dict[str, list[InstanceCandidate]]:
    out: dict[str, list[InstanceCandidate]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = CANDIDATE_CSV_HEADER.split(",")
        if reader.fieldnames != expected:
            raise ValueError(f"bad candidate CSV header {reader.fieldnames}, expected {expected}")
        for row in reader:
            label = row["label"]
            out.setdefault(row["patient_id"], []).append(
                InstanceCandidate(
                    id=int(row["candidate_id"]),
                    voxel_indices=None,
                    centroid_mm=(float(row["cx_mm"]), float(row["cy_mm"]), float(row["cz_mm"])),
                    volume_mm3=float(row["volume_mm3"]),
                    radius_mm=float(row["radius_mm"]),
                    score=float(row["score"]),
                    label=None if label == "" else bool(int(label)),
                )
            )
    return out


def write_gt_csv(path, per_patient: dict[str, list[GroundTruthInstance]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(GT_CSV_HEADER + "\n")
        for pid, gts in per_patient.items():
            for g in gts:
                cx, cy, cz = g.centroid_mm
                fh.write(
                    f"{pid},{g.id},{_fmt(cx)},{_fmt(cy)},{_fmt(cz)},"
                    f"{_fmt(g.volume_mm3)},{_fmt(g.radius_mm)}\n"
                )


def read_gt_csv(path) -> dict[str, list[GroundTruthInstance]]:
    out: dict[str, list[GroundTruthInstance]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = GT_CSV_HEADER.split(",")
        if reader.fieldnames != expected:
            raise ValueError(f"bad GT CSV header {reader.fieldnames}, expected {expected}")
        for row in reader:
            out.setdefault(row["patient_id"], []).append(
                GroundTruthInstance(
                    id=int(row["gt_id"]),
                    voxel_indices=None,
                    centroid_mm=(float(row["cx_mm"]), float(row["cy_mm"]), float(row["cz_mm"])),
                    volume_mm3=float(row["volume_mm3"]),
                    radius_mm=float(row["radius_mm"]),
                )
            )
    return out
