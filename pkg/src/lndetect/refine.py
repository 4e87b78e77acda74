"""Second-stage candidate rescoring plumbing.

Extracts local 3D CT/PET patches and a global 2D slice around each
candidate, jitters bounding boxes, applies axial-plane augmentation, and
scores candidates through a pluggable classifier.  The learned classifier
itself is out of scope here; a deterministic hand-crafted logistic
baseline and an external-executable hook are provided instead.
"""

from __future__ import annotations

import csv
import logging
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .distance import SignedDistanceMap
from .instances import InstanceCandidate
from .volume import KIND_CT, KIND_GENERIC, VoxelGrid, write_volume

log = logging.getLogger(__name__)

PATCH_DIMS = (48, 48, 32)  # (x, y, z) voxels
PATCH_MARGIN = 8  # background voxels kept on every side after any resize
GLOBAL_SLICE_SHAPE = (120, 120)  # (y, x)
LOCAL_FEATURE_DIM = 1024  # local 3D patch descriptor length
GLOBAL_TAG_DIM = 171  # lesion tag vector length
CT_PAD = -200.0  # CT clamp floor doubles as the pad value
PET_PAD = 0.0
DEFAULT_JITTER_RANGE = 3

AUGMENT_OPS = ("rot90", "rot180", "rot270", "axial-flip")

Box = tuple[int, int, int, int, int, int]  # (x0, y0, z0, x1, y1, z1), upper-exclusive


@dataclass(frozen=True, eq=False)
class CandidatePatch:
    ct_patch: VoxelGrid
    pet_patch: VoxelGrid
    global_slice: np.ndarray
    bboxes: tuple[Box, ...]
    candidate_id: int
    label: bool | None = None

    def __post_init__(self):
        if self.ct_patch.dims != PATCH_DIMS or self.pet_patch.dims != PATCH_DIMS:
            raise ValueError(
                f"patch dims must be {PATCH_DIMS}, got {self.ct_patch.dims} / {self.pet_patch.dims}"
            )
        if self.global_slice.shape != GLOBAL_SLICE_SHAPE:
            raise ValueError(
                f"global slice must be {GLOBAL_SLICE_SHAPE}, got {self.global_slice.shape}"
            )


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Local patch descriptor and global tag vector, concatenated local-first."""

    local_vec: np.ndarray
    global_vec: np.ndarray
    assembled: np.ndarray


@dataclass(frozen=True)
class ClassifierScore:
    candidate_id: int
    q: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"classifier score must lie in [0, 1], got {self.q}")


def assemble_feature(local_vec: np.ndarray, global_vec: np.ndarray) -> FeatureBundle:
    local_vec = np.asarray(local_vec, dtype=np.float64).ravel()
    global_vec = np.asarray(global_vec, dtype=np.float64).ravel()
    if local_vec.size != LOCAL_FEATURE_DIM:
        raise ValueError(f"local vector must have {LOCAL_FEATURE_DIM} entries, got {local_vec.size}")
    if global_vec.size != GLOBAL_TAG_DIM:
        raise ValueError(f"global vector must have {GLOBAL_TAG_DIM} entries, got {global_vec.size}")
    return FeatureBundle(local_vec, global_vec, np.concatenate([local_vec, global_vec]))


# ---------------------------------------------------------------------------
# Geometry: patch crop, resize, global slice
# ---------------------------------------------------------------------------


def _centroid_voxel(grid: VoxelGrid, cand: InstanceCandidate) -> tuple[int, int, int]:
    sp = np.asarray(grid.spacing)
    org = np.asarray(grid.origin)
    idx = np.floor((np.asarray(cand.centroid_mm) - org) / sp + 0.5).astype(int)
    nx, ny, nz = grid.dims
    if not (0 <= idx[0] < nx and 0 <= idx[1] < ny and 0 <= idx[2] < nz):
        raise ValueError(f"candidate centroid {cand.centroid_mm} lies outside the volume")
    return int(idx[0]), int(idx[1]), int(idx[2])


def _crop_padded(vol: np.ndarray, start_zyx, size_zyx, pad_value: float) -> np.ndarray:
    out = np.full(size_zyx, pad_value, dtype=np.float32)
    src = []
    dst = []
    for ax in range(3):
        s0 = start_zyx[ax]
        s1 = s0 + size_zyx[ax]
        c0 = max(s0, 0)
        c1 = min(s1, vol.shape[ax])
        if c0 >= c1:
            return out
        src.append(slice(c0, c1))
        dst.append(slice(c0 - s0, c1 - s0))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def _resize_trilinear(vol: np.ndarray, out_shape_zyx) -> np.ndarray:
    # align-corners mapping: output i samples input i*(R-1)/(P-1)
    coords = []
    for ax in range(3):
        r, p = vol.shape[ax], out_shape_zyx[ax]
        if p == 1 or r == 1:
            coords.append(np.zeros(p))
        else:
            coords.append(np.arange(p) * (r - 1) / (p - 1))
    uz, uy, ux = coords
    from .preprocess import _trilinear_gather

    return _trilinear_gather(vol, ux, uy, uz).astype(np.float32)


def crop_patch(ct: VoxelGrid, pet: VoxelGrid, cand: InstanceCandidate) -> CandidatePatch:
    """Crop 48x48x32 CT/PET patches centered on the candidate.

    Out-of-volume regions pad with the CT clamp floor / PET zero.  If the
    candidate extent would leave less than an 8-voxel background margin on
    some axis, the enclosing region is enlarged and resized down
    (trilinear) so the margin holds.  The first bbox is the candidate's
    own box in patch coordinates.
    """
    if cand.voxel_indices is None:
        raise ValueError("patch extraction requires the candidate's voxel set")
    if ct.geometry != pet.geometry:
        raise ValueError("CT and PET grids must share geometry")
    cx, cy, cz = _centroid_voxel(ct, cand)
    nz, ny, nx = ct.values.shape
    zyx = np.stack(np.unravel_index(cand.voxel_indices, (nz, ny, nx)), axis=1)
    lo = zyx.min(axis=0)  # (z, y, x)
    hi = zyx.max(axis=0) + 1
    lo_xyz = lo[::-1]
    hi_xyz = hi[::-1]
    extent_xyz = hi_xyz - lo_xyz
    center_xyz = (cx, cy, cz)

    region_xyz = []
    start_xyz = []
    for ax in range(3):
        p = PATCH_DIMS[ax]
        m = PATCH_MARGIN
        e = int(extent_xyz[ax])
        if e <= p - 2 * m:
            region_xyz.append(p)
            start_xyz.append(center_xyz[ax] - p // 2)
        else:
            # enlarge the source region (centered on the candidate's box)
            # until the align-corners mapping leaves >= m voxels of margin
            # on both sides; integer split of the slack makes the analytic
            # bound off by up to one, hence the refinement loop
            r = int(np.ceil((e - 1) * (p - 1) / (p - 2 * m - 1))) + 1
            while True:
                scale = (p - 1) / (r - 1)
                off = (r - e) // 2
                if off * scale >= m and (off + e - 1) * scale <= p - 1 - m:
                    break
                r += 1
            region_xyz.append(r)
            start_xyz.append(int(lo_xyz[ax]) - off)
    start_zyx = start_xyz[::-1]
    region_zyx = region_xyz[::-1]
    patch_zyx = PATCH_DIMS[::-1]

    ct_crop = _crop_padded(ct.values, start_zyx, region_zyx, CT_PAD)
    pet_crop = _crop_padded(pet.values, start_zyx, region_zyx, PET_PAD)
    if tuple(region_zyx) != patch_zyx:
        ct_crop = _resize_trilinear(ct_crop, patch_zyx)
        pet_crop = _resize_trilinear(pet_crop, patch_zyx)

    # candidate bbox in patch coordinates (covering box: floor lo, ceil hi)
    box = []
    hi_box = []
    for ax in range(3):  # x, y, z
        r, p = region_xyz[ax], PATCH_DIMS[ax]
        scale = 1.0 if r == p else (p - 1) / (r - 1) if r > 1 else 1.0
        b0 = int(np.clip(np.floor((int(lo_xyz[ax]) - start_xyz[ax]) * scale), 0, p - 1))
        b1 = int(np.clip(np.ceil((int(hi_xyz[ax]) - 1 - start_xyz[ax]) * scale) + 1, b0 + 1, p))
        box.append(b0)
        hi_box.append(b1)
    base_box: Box = (box[0], box[1], box[2], hi_box[0], hi_box[1], hi_box[2])

    spacing = tuple(
        s if r == p else s * r / p
        for s, r, p in zip(ct.spacing, region_xyz, PATCH_DIMS)
    )
    origin = tuple(
        o + s * st for o, s, st in zip(ct.origin, ct.spacing, start_xyz)
    )
    return CandidatePatch(
        ct_patch=VoxelGrid(ct_crop, spacing, origin, KIND_CT),
        pet_patch=VoxelGrid(pet_crop, spacing, origin, pet.kind),
        global_slice=crop_global_slice(ct, cand),
        bboxes=(base_box,),
        candidate_id=cand.id,
        label=cand.label,
    )


def crop_global_slice(ct: VoxelGrid, cand: InstanceCandidate) -> np.ndarray:
    """120x120 axial CT crop at the candidate's slice, padded with the clamp floor."""
    cx, cy, cz = _centroid_voxel(ct, cand)
    sl = ct.values[cz]
    h, w = GLOBAL_SLICE_SHAPE
    start = (cy - h // 2, cx - w // 2)
    out = np.full(GLOBAL_SLICE_SHAPE, CT_PAD, dtype=np.float32)
    c0y, c1y = max(start[0], 0), min(start[0] + h, sl.shape[0])
    c0x, c1x = max(start[1], 0), min(start[1] + w, sl.shape[1])
    if c0y < c1y and c0x < c1x:
        out[c0y - start[0] : c1y - start[0], c0x - start[1] : c1x - start[1]] = sl[
            c0y:c1y, c0x:c1x
        ]
    return out


# ---------------------------------------------------------------------------
# Bbox jitter and axial augmentation
# ---------------------------------------------------------------------------


def jitter_bboxes(
    cand_box: Box,
    k: int,
    jitter_range: int = DEFAULT_JITTER_RANGE,
    seed: int = 0,
    bounds=PATCH_DIMS,
) -> tuple[Box, ...]:
    """k copies of the box with each corner offset uniformly in [-range, range].

    Offsets are drawn per corner per dimension and the results clipped to
    the patch bounds; deterministic under the seed.
    """
    if k < 1:
        raise ValueError(f"need k >= 1 boxes, got {k}")
    if jitter_range < 0:
        raise ValueError(f"jitter range must be >= 0, got {jitter_range}")
    x0, y0, z0, x1, y1, z1 = cand_box
    if not (x0 < x1 and y0 < y1 and z0 < z1):
        raise ValueError(f"degenerate box {cand_box}")
    rng = np.random.default_rng(seed)
    offs = rng.integers(-jitter_range, jitter_range + 1, size=(k, 2, 3))
    out = []
    for i in range(k):
        lo = np.array([x0, y0, z0]) + offs[i, 0]
        hi = np.array([x1, y1, z1]) + offs[i, 1]
        lo = np.clip(lo, 0, np.array(bounds) - 1)
        hi = np.clip(np.maximum(hi, lo + 1), 1, np.array(bounds))
        out.append((int(lo[0]), int(lo[1]), int(lo[2]), int(hi[0]), int(hi[1]), int(hi[2])))
    return tuple(out)


def _rot_box_axial(box: Box, k: int, nx: int, ny: int) -> Box:
    """Rotate a box with np.rot90(values, k, axes=(1, 2)) semantics."""
    x0, y0, z0, x1, y1, z1 = box
    for _ in range(k % 4):
        # (y, x) -> (nx-1-x, y): new y-range from old x, new x-range from old y
        nx0, nx1 = y0, y1
        ny0, ny1 = nx - x1, nx - x0
        x0, x1, y0, y1 = nx0, nx1, ny0, ny1
        nx, ny = ny, nx
    return (x0, y0, z0, x1, y1, z1)


def _flip_box_axial(box: Box, nx: int) -> Box:
    x0, y0, z0, x1, y1, z1 = box
    return (nx - x1, y0, z0, nx - x0, y1, z1)


def sample_augment_ops(seed: int) -> tuple[str, ...]:
    """Training-time augmentation policy: a rotation with probability 0.5
    (90/180/270 uniformly), then an axial flip with probability 0.25."""
    rng = np.random.default_rng(seed)
    ops = []
    if rng.random() < 0.5:
        ops.append(("rot90", "rot180", "rot270")[rng.integers(0, 3)])
    if rng.random() < 0.25:
        ops.append("axial-flip")
    return tuple(ops)


def augment_patch(
    patch: CandidatePatch,
    ops: Sequence[str] | None = None,
    seed: int | None = None,
) -> CandidatePatch:
    """Apply axial-plane rotations/flips to CT and PET consistently.

    ``ops`` is applied in order; when None, ops are sampled from the
    training policy using ``seed``.  Bounding boxes follow the transform;
    the label never changes.
    """
    if ops is None:
        ops = sample_augment_ops(0 if seed is None else seed)
    ct = patch.ct_patch.values
    pet = patch.pet_patch.values
    gsl = patch.global_slice
    boxes = list(patch.bboxes)
    nx, ny = PATCH_DIMS[0], PATCH_DIMS[1]
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ValueError(f"unknown augmentation op {op!r}")
        if op == "axial-flip":
            ct = np.flip(ct, axis=2)
            pet = np.flip(pet, axis=2)
            gsl = np.flip(gsl, axis=1)
            boxes = [_flip_box_axial(b, nx) for b in boxes]
        else:
            k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
            ct = np.rot90(ct, k, axes=(1, 2))
            pet = np.rot90(pet, k, axes=(1, 2))
            gsl = np.rot90(gsl, k)
            boxes = [_rot_box_axial(b, k, nx, ny) for b in boxes]
            if k % 2 == 1:
                nx, ny = ny, nx
    return replace(
        patch,
        ct_patch=patch.ct_patch.with_values(np.ascontiguousarray(ct)),
        pet_patch=patch.pet_patch.with_values(np.ascontiguousarray(pet)),
        global_slice=np.ascontiguousarray(gsl),
        bboxes=tuple(boxes),
    )


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


class CandidateScorer(Protocol):
    def score(self, patch: CandidatePatch, features: FeatureBundle | None) -> float: ...


@dataclass(frozen=True)
class CandidateStats:
    mean_pet: float
    mean_ct: float
    radius_mm: float
    abs_dist_mm: float


def candidate_stats(
    cands: Sequence[InstanceCandidate],
    ct: VoxelGrid,
    pet: VoxelGrid,
    dmap: SignedDistanceMap | None = None,
) -> dict[int, CandidateStats]:
    """Hand-crafted per-candidate features for the baseline scorer."""
    ct_flat = ct.values.ravel()
    pet_flat = pet.values.ravel()
    d_flat = dmap.values.ravel() if dmap is not None else None
    out = {}
    for c in cands:
        if c.voxel_indices is None:
            raise ValueError("candidate stats require voxel index sets")
        lin = c.voxel_indices
        if d_flat is not None:
            ix, iy, iz = _centroid_voxel(ct, c)
            nzv, nyv, nxv = ct.values.shape
            dist = abs(float(d_flat[(iz * nyv + iy) * nxv + ix]))
        else:
            dist = 0.0
        out[c.id] = CandidateStats(
            mean_pet=float(pet_flat[lin].mean(dtype=np.float64)),
            mean_ct=float(ct_flat[lin].mean(dtype=np.float64)),
            radius_mm=c.radius_mm,
            abs_dist_mm=dist,
        )
    return out


class BaselineScorer:
    """Fixed logistic combination of four hand-crafted candidate features.

    q = sigmoid(bias + w_pet*mean_pet + w_radius*radius_mm
                + w_dist*abs_dist_mm + w_ct*mean_ct)

    Weights are constants, not trained: PET uptake dominates, tumor
    distance mildly penalizes, size and CT density contribute weakly.
    """

    BIAS = -2.0
    W_PET = 1.0
    W_RADIUS = 0.1
    W_DIST = -0.01
    W_CT = 0.005

    def __init__(self, stats: Mapping[int, CandidateStats]):
        self._stats = dict(stats)

    def score(self, patch: CandidatePatch, features: FeatureBundle | None = None) -> float:
        s = self._stats[patch.candidate_id]
        z = (
            self.BIAS
            + self.W_PET * s.mean_pet
            + self.W_RADIUS * s.radius_mm
            + self.W_DIST * s.abs_dist_mm
            + self.W_CT * s.mean_ct
        )
        return float(1.0 / (1.0 + np.exp(-z)))


class ExternalScorer:
    """Scores a batch through an external executable.

    The executable is invoked with one argument, a staging directory
    containing per-candidate patch VVOLs (``<id>_ct.vvol``,
    ``<id>_pet.vvol``, ``<id>_slice.vvol``) and ``features.csv``; it must
    write ``scores.csv`` with header ``candidate_id,q`` into the same
    directory.
    """

    def __init__(self, command: Sequence[str]):
        self.command = list(command)

    def score_batch(
        self,
        patches: Sequence[CandidatePatch],
        features: Mapping[int, FeatureBundle] | None = None,
    ) -> dict[int, float]:
        with tempfile.TemporaryDirectory(prefix="lndetect_scorer_") as tmp:
            tmpdir = Path(tmp)
            for p in patches:
                write_volume(p.ct_patch, tmpdir / f"{p.candidate_id:06d}_ct.vvol")
                write_volume(p.pet_patch, tmpdir / f"{p.candidate_id:06d}_pet.vvol")
                sl = VoxelGrid(
                    p.global_slice[None, :, :], (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), KIND_GENERIC
                )
                write_volume(sl, tmpdir / f"{p.candidate_id:06d}_slice.vvol")
            with open(tmpdir / "features.csv", "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                header = ["candidate_id"]
                header += [f"local_{i}" for i in range(LOCAL_FEATURE_DIM)]
                header += [f"tag_{i}" for i in range(GLOBAL_TAG_DIM)]
                writer.writerow(header)
                if features:
                    for p in patches:
                        fb = features.get(p.candidate_id)
                        if fb is None:
                            continue
                        writer.writerow(
                            [p.candidate_id] + [repr(v) for v in fb.assembled.tolist()]
                        )
            subprocess.run(self.command + [str(tmpdir)], check=True)
            scores = {}
            with open(tmpdir / "scores.csv", "r", encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["candidate_id", "q"]:
                    raise ValueError(f"bad scores.csv header {reader.fieldnames}")
                for row in reader:
                    scores[int(row["candidate_id"])] = float(row["q"])
        return scores


def classify_candidates(
    patches: Sequence[CandidatePatch],
    features: Mapping[int, FeatureBundle] | None = None,
    model: CandidateScorer | ExternalScorer | None = None,
    fallback_scores: Mapping[int, float] | None = None,
) -> list[ClassifierScore]:
    """One ClassifierScore per candidate, ordered by candidate id.

    A per-candidate scorer failure falls back to that candidate's
    first-stage score when ``fallback_scores`` provides one; otherwise the
    error propagates.
    """
    if model is None:
        raise ValueError("a scorer model is required")
    patches = sorted(patches, key=lambda p: p.candidate_id)
    raw: dict[int, float] = {}
    batch_error: Exception | None = None
    if hasattr(model, "score_batch"):
        try:
            raw = model.score_batch(patches, features)
        except Exception as exc:  # batch path failed entirely; fall back per candidate
            batch_error = exc
    out = []
    for p in patches:
        try:
            if hasattr(model, "score_batch"):
                if batch_error is not None:
                    raise batch_error
                q = raw[p.candidate_id]
            else:
                fb = features.get(p.candidate_id) if features else None
                q = model.score(p, fb)
            out.append(ClassifierScore(p.candidate_id, float(q)))
        except Exception as exc:
            if fallback_scores is None or p.candidate_id not in fallback_scores:
                raise
            log.warning(
                "scorer failed for candidate %d (%s); keeping first-stage score",
                p.candidate_id,
                exc,
            )
            out.append(
                ClassifierScore(p.candidate_id, float(fallback_scores[p.candidate_id]))
            )
    return out


def rescore_candidates(
    cands: Sequence[InstanceCandidate], scores: Sequence[ClassifierScore]
) -> list[InstanceCandidate]:
    """Replace first-stage scores with classifier scores; geometry untouched."""
    by_id = {s.candidate_id: s.q for s in scores}
    return [c.with_score(by_id[c.id]) if c.id in by_id else c for c in cands]


# ---------------------------------------------------------------------------
# Feature CSV ingest (1024- and 171-column layouts)
# ---------------------------------------------------------------------------


def _read_vector_csv(path, id_column: str, n: int) -> dict[int, np.ndarray]:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != id_column or len(header) != n + 1:
            raise ValueError(
                f"expected header {id_column!r} + {n} value columns, got {len(header)} columns"
            )
        for row in reader:
            vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            if vec.size != n:
                raise ValueError(f"row for id {row[0]} has {vec.size} values, expected {n}")
            out[int(row[0])] = vec
    return out


def read_local_features_csv(path) -> dict[int, np.ndarray]:
    """candidate_id plus 1024 local-descriptor columns."""
    return _read_vector_csv(path, "candidate_id", LOCAL_FEATURE_DIM)


def read_global_tags_csv(path) -> dict[int, np.ndarray]:
    """candidate_id plus 171 tag columns."""
    return _read_vector_csv(path, "candidate_id", GLOBAL_TAG_DIM)


def load_feature_bundles(local_csv, tags_csv) -> dict[int, FeatureBundle]:
    local = read_local_features_csv(local_csv)
    tags = read_global_tags_csv(tags_csv)
    ids = sorted(set(local) & set(tags))
    return {i: assemble_feature(local[i], tags[i]) for i in ids}
