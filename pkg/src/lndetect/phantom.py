"""Synthetic patient generator and oracle segmenter.

Phantoms are analytic: an ellipsoidal tumor plus spherical nodes on a
uniform background, with optional Gaussian intensity noise.  Masks are
exact (noise-free).  The oracle segmenter stands in for trained
segmentation models: it emits a probability blob over each ground-truth
node with a configurable detection probability, plus Poisson-distributed
spurious blobs, so cohort-level detection statistics are controllable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .instances import GroundTruthInstance, gt_instances
from .volume import (
    KIND_CT,
    KIND_PET,
    KIND_PROBABILITY,
    BinaryMask,
    VoxelGrid,
)


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]
    hu: float


@dataclass(frozen=True)
class SphereNode:
    center_mm: tuple[float, float, float]
    radius_mm: float
    hu: float
    pet_intensity: float
    proximal_intent: bool = True


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    spacing_mm: tuple[float, float, float]
    tumor: Ellipsoid
    nodes: tuple[SphereNode, ...]
    background_hu: float = 0.0
    noise_std_hu: float = 0.0
    noise_std_pet: float = 0.0
    seed: int = 0

    def __post_init__(self):
        extent = [d * s for d, s in zip(self.dims, self.spacing_mm)]
        for n in self.nodes:
            if n.radius_mm <= 0:
                raise ValueError(f"node radius must be positive, got {n.radius_mm}")
            if not all(0 <= c < e for c, e in zip(n.center_mm, extent)):
                raise ValueError(f"node center {n.center_mm} outside volume extent {extent}")
        for i, a in enumerate(self.nodes):
            for b in self.nodes[i + 1 :]:
                gap = float(
                    np.linalg.norm(np.subtract(a.center_mm, b.center_mm))
                ) - (a.radius_mm + b.radius_mm)
                if gap <= 0:
                    raise ValueError(
                        f"nodes at {a.center_mm} and {b.center_mm} overlap (gap {gap:.2f} mm)"
                    )


@dataclass(frozen=True)
class OracleSpec:
    """Simulated segmenter behavior.

    Each ground-truth node is emitted independently with probability
    ``p_detect``; spurious blobs arrive with Poisson(``fp_rate_lambda``)
    count and radii uniform in ``fp_radius_mm``.  Blob probability levels
    are ``tp_level`` / ``fp_level`` perturbed by Gaussian score noise and
    clamped to [0.55, 0.98] so blobs survive the default 0.5 threshold.
    """

    p_detect: float
    fp_rate_lambda: float
    fp_radius_mm: tuple[float, float] = (2.5, 4.0)
    score_noise_std: float = 0.0
    seed: int = 0
    tp_level: float = 0.9
    fp_level: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValueError(f"p_detect must lie in [0, 1], got {self.p_detect}")
        if not (np.isfinite(self.fp_rate_lambda) and self.fp_rate_lambda >= 0):
            raise ValueError(f"fp_rate_lambda must be finite and >= 0, got {self.fp_rate_lambda}")
        lo, hi = self.fp_radius_mm
        if not (0 < lo <= hi):
            raise ValueError(f"bad fp radius range {self.fp_radius_mm}")
        for level in (self.tp_level, self.fp_level):
            if not 0.0 < level <= 1.0:
                raise ValueError(f"blob level must lie in (0, 1], got {level}")


@dataclass(frozen=True)
class PhantomResult:
    spec: PhantomSpec
    ct: VoxelGrid
    pet: VoxelGrid
    tumor: BinaryMask
    ln: BinaryMask
    gt: tuple[GroundTruthInstance, ...]


def _voxel_center_axes(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    return (
        np.arange(nx) * sx,
        np.arange(ny) * sy,
        np.arange(nz) * sz,
    )


def _ellipsoid_bits(spec: PhantomSpec, e: Ellipsoid) -> np.ndarray:
    xs, ys, zs = _voxel_center_axes(spec)
    cx, cy, cz = e.center_mm
    ax, ay, az = e.semi_axes_mm
    gx = ((xs - cx) / ax) ** 2
    gy = ((ys - cy) / ay) ** 2
    gz = ((zs - cz) / az) ** 2
    return (gz[:, None, None] + gy[None, :, None] + gx[None, None, :]) <= 1.0


def _sphere_bits(spec: PhantomSpec, center_mm, radius_mm: float) -> np.ndarray:
    xs, ys, zs = _voxel_center_axes(spec)
    cx, cy, cz = center_mm
    d2 = (
        ((zs - cz) ** 2)[:, None, None]
        + ((ys - cy) ** 2)[None, :, None]
        + ((xs - cx) ** 2)[None, None, :]
    )
    return d2 <= radius_mm * radius_mm


def generate_phantom(spec: PhantomSpec) -> PhantomResult:
    """Render the phantom volumes, exact masks, and ground-truth instances.

    Deterministic under spec.seed; masks never depend on the noise
    parameters.  Draw order is fixed: CT noise field first, then PET.
    """
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)

    tumor_bits = _ellipsoid_bits(spec, spec.tumor)
    if not tumor_bits.any():
        raise ValueError("tumor ellipsoid covers no voxels")
    ln_bits = np.zeros(shape, dtype=bool)

    ct = np.full(shape, spec.background_hu, dtype=np.float64)
    pet = np.zeros(shape, dtype=np.float64)
    ct[tumor_bits] = spec.tumor.hu
    for node in spec.nodes:
        bits = _sphere_bits(spec, node.center_mm, node.radius_mm)
        ln_bits |= bits
        ct[bits] = node.hu
        pet[bits] = node.pet_intensity
    if spec.noise_std_hu > 0:
        ct += rng.normal(0.0, spec.noise_std_hu, size=shape)
    if spec.noise_std_pet > 0:
        pet += rng.normal(0.0, spec.noise_std_pet, size=shape)

    sp, org = spec.spacing_mm, (0.0, 0.0, 0.0)
    ln = BinaryMask(ln_bits, sp, org)
    gt = tuple(gt_instances(ln))
    if spec.nodes and len(gt) != len(spec.nodes):
        raise ValueError(
            f"planted {len(spec.nodes)} nodes but mask labeling found {len(gt)} instances"
        )
    return PhantomResult(
        spec=spec,
        ct=VoxelGrid(ct.astype(np.float32), sp, org, KIND_CT),
        pet=VoxelGrid(pet.astype(np.float32), sp, org, KIND_PET),
        tumor=BinaryMask(tumor_bits, sp, org),
        ln=ln,
        gt=gt,
    )


def _paint_blob(prob, spec: PhantomSpec, center_mm, radius_mm, level, taper_mm):
    """max-combine a blob: ``level`` inside the sphere, linear taper to 0 over taper_mm."""
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    cx, cy, cz = center_mm
    reach = radius_mm + taper_mm
    x0, x1 = max(int((cx - reach) / sx) - 1, 0), min(int((cx + reach) / sx) + 2, nx)
    y0, y1 = max(int((cy - reach) / sy) - 1, 0), min(int((cy + reach) / sy) + 2, ny)
    z0, z1 = max(int((cz - reach) / sz) - 1, 0), min(int((cz + reach) / sz) + 2, nz)
    xs = np.arange(x0, x1) * sx - cx
    ys = np.arange(y0, y1) * sy - cy
    zs = np.arange(z0, z1) * sz - cz
    d = np.sqrt(
        (zs**2)[:, None, None] + (ys**2)[None, :, None] + (xs**2)[None, None, :]
    )
    profile = level * np.clip(1.0 - np.maximum(d - radius_mm, 0.0) / taper_mm, 0.0, 1.0)
    region = prob[z0:z1, y0:y1, x0:x1]
    np.maximum(region, profile, out=region)


def oracle_probmap(
    phantom: PhantomResult, oracle: OracleSpec, seed=None
) -> VoxelGrid:
    """Simulate one segmentation-probability volume for a phantom patient.

    ``seed`` overrides oracle.seed (used to derive independent per-stream
    maps).  Draw order is fixed: per-node detection Bernoullis in node
    order, each detected node's level perturbation, then the FP count,
    then each FP's level, radius, and placement attempts.
    """
    spec = phantom.spec
    rng = np.random.default_rng(oracle.seed if seed is None else seed)
    nx, ny, nz = spec.dims
    prob = np.zeros((nz, ny, nx), dtype=np.float64)
    taper = max(spec.spacing_mm)

    def blob_level(base: float) -> float:
        lvl = base + (rng.normal(0.0, oracle.score_noise_std) if oracle.score_noise_std > 0 else 0.0)
        return float(np.clip(lvl, 0.55, 0.98))

    for node in spec.nodes:
        if rng.random() < oracle.p_detect:
            _paint_blob(
                prob, spec, node.center_mm, node.radius_mm, blob_level(oracle.tp_level), taper
            )

    placed: list[tuple[tuple, float]] = []  # spurious blobs placed so far
    n_fp = int(rng.poisson(oracle.fp_rate_lambda))
    extent = np.array([d * s for d, s in zip(spec.dims, spec.spacing_mm)])
    t_center = np.asarray(spec.tumor.center_mm)
    t_axes = np.asarray(spec.tumor.semi_axes_mm)
    for _ in range(n_fp):
        level = blob_level(oracle.fp_level)
        radius = float(rng.uniform(*oracle.fp_radius_mm))
        margin = radius + taper + max(spec.spacing_mm)
        for _attempt in range(1000):
            c = rng.uniform(margin, extent - margin)
            # keep clear of GT nodes, prior FPs, and the (inflated) tumor
            sep = 2.0 * taper + 2.0
            if any(
                np.linalg.norm(c - np.asarray(n.center_mm)) <= radius + n.radius_mm + sep
                for n in spec.nodes
            ):
                continue
            if any(
                np.linalg.norm(c - np.asarray(pc)) <= radius + pr + sep
                for pc, pr in placed
            ):
                continue
            if (((c - t_center) / (t_axes + radius + sep)) ** 2).sum() <= 1.0:
                continue
            placed.append((tuple(c), radius))
            _paint_blob(prob, spec, tuple(c), radius, level, taper)
            break
        else:
            raise RuntimeError(
                f"could not place spurious blob (radius {radius:.1f} mm) after 1000 attempts"
            )

    return VoxelGrid(
        prob.astype(np.float32), spec.spacing_mm, (0.0, 0.0, 0.0), KIND_PROBABILITY
    )


def derive_patient_seed(master_seed: int, patient_index: int, tag: int = 0) -> int:
    """Stable per-(patient, purpose) seed so parallel and serial runs agree."""
    ss = np.random.SeedSequence([int(master_seed), int(patient_index), int(tag)])
    return int(ss.generate_state(1)[0])


def cohort_spec(template: PhantomSpec, master_seed: int, patient_index: int) -> PhantomSpec:
    return replace(template, seed=derive_patient_seed(master_seed, patient_index, 0))


# ---------------------------------------------------------------------------
# JSON (de)serialization for CLI spec files
# ---------------------------------------------------------------------------


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    d = dict(d)
    tumor = d.pop("tumor")
    nodes = d.pop("nodes")
    allowed = {
        "dims",
        "spacing_mm",
        "background_hu",
        "noise_std_hu",
        "noise_std_pet",
        "seed",
    }
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
    return PhantomSpec(
        dims=tuple(d["dims"]),
        spacing_mm=tuple(d["spacing_mm"]),
        tumor=Ellipsoid(
            tuple(tumor["center_mm"]), tuple(tumor["semi_axes_mm"]), float(tumor["hu"])
        ),
        nodes=tuple(
            SphereNode(
                tuple(n["center_mm"]),
                float(n["radius_mm"]),
                float(n["hu"]),
                float(n["pet_intensity"]),
                bool(n.get("proximal_intent", True)),
            )
            for n in nodes
        ),
        background_hu=float(d.get("background_hu", 0.0)),
        noise_std_hu=float(d.get("noise_std_hu", 0.0)),
        noise_std_pet=float(d.get("noise_std_pet", 0.0)),
        seed=int(d.get("seed", 0)),
    )


def oracle_spec_from_dict(d: dict) -> OracleSpec:
    allowed = {
        "p_detect",
        "fp_rate_lambda",
        "fp_radius_mm",
        "score_noise_std",
        "seed",
        "tp_level",
        "fp_level",
    }
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown oracle spec keys: {sorted(unknown)}")
    kwargs = dict(d)
    if "fp_radius_mm" in kwargs:
        kwargs["fp_radius_mm"] = tuple(kwargs["fp_radius_mm"])
    return OracleSpec(**kwargs)


def load_phantom_spec(path) -> PhantomSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return phantom_spec_from_dict(json.load(fh))


def load_oracle_spec(path) -> OracleSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return oracle_spec_from_dict(json.load(fh))
