"""End-to-end two-stage detection pipeline over a patient cohort.

Per patient: preprocess -> signed distance map -> stratify -> late fusion
-> candidate extraction -> second-stage rescore -> matching; then
cohort-level PR/FROC metrics, a candidates CSV, a JSON report embedding
the resolved config, and rendered curve figures.

Patients come either from a manifest of VVOL files or from a synthetic
phantom template whose stream probabilities are simulated by oracle
segmenters (one realization per stream, shared by the proximal and distal
categories).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import evaluate, refine
from .distance import signed_edt, stratify
from .fusion import StreamSet, fuse_late
from .instances import (
    extract_candidates,
    gt_instances,
    write_candidates_csv,
)
from .phantom import (
    PhantomSpec,
    cohort_spec,
    derive_patient_seed,
    generate_phantom,
    oracle_spec_from_dict,
    phantom_spec_from_dict,
)
from .preprocess import compute_cohort_stats, normalize_pet, resample, truncate_hu
from .volume import KIND_PROBABILITY, BinaryMask, VoxelGrid, read_volume

log = logging.getLogger(__name__)

STREAM_KEYS = ("ct_prox", "ef_prox", "ct_dis", "ef_dis")

_CONFIG_DOC = {
    "d_mm": "tumor-distance split between proximal and distal regions (mm)",
    "tau": "probability threshold for the segmentation mask",
    "connectivity": "3D connectivity for instance labeling (6, 18 or 26)",
    "min_voxels": "smallest surviving component size in voxels",
    "hu_window": "CT clamp window in HU",
    "target_spacing_mm": "resampling grid (mm)",
    "froc_budgets": "FP-per-patient budgets averaged by mFROC",
    "operating_precision": "precision at which the operating threshold is picked",
}


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str | None = None
    out_dir: str | None = None
    synthetic: dict | None = None  # {"template": phantom-spec dict, "patients": N}
    oracle_ct: dict | None = None  # oracle-spec dict or None for a silent stream
    oracle_ef: dict | None = None
    d_mm: float = 70.0
    tau: float = 0.5
    connectivity: int = 26
    min_voxels: int = 8
    hu_window: tuple[float, float] = (-200.0, 300.0)
    target_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.5)
    resample_inputs: bool = True
    pet_mean: float | None = None  # None: pooled over the cohort
    pet_std: float | None = None
    exclude_tumor_interior: bool = True
    radius_factor_band: tuple[float, float] = (0.5, 1.5)
    min_overlap_frac: float = 0.0
    froc_budgets: tuple[float, ...] = (2.0, 3.0, 4.0, 6.0)
    operating_precision: float = 0.15
    precision_band: tuple[float, float] = (0.10, 0.20)
    scorer: str = "first-stage"  # first-stage | baseline | external
    external_cmd: tuple[str, ...] | None = None
    jitter_count: int = 4
    jitter_range: int = 3
    seed: int = 0
    workers: int = 1
    figures: bool = True

    def __post_init__(self):
        if self.scorer not in ("first-stage", "baseline", "external"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.scorer == "external" and not self.external_cmd:
            raise ValueError("scorer 'external' requires external_cmd")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_voxels < 1:
            raise ValueError(f"min_voxels must be >= 1, got {self.min_voxels}")
        if not self.hu_window[0] < self.hu_window[1]:
            raise ValueError(f"bad HU window {self.hu_window}")
        if any(s <= 0 for s in self.target_spacing_mm):
            raise ValueError(f"bad target spacing {self.target_spacing_mm}")
        lo, hi = self.radius_factor_band
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius factor band {self.radius_factor_band}")
        if not 0.0 < self.operating_precision <= 1.0:
            raise ValueError(f"bad operating precision {self.operating_precision}")
        blo, bhi = self.precision_band
        if not 0.0 <= blo <= bhi <= 1.0:
            raise ValueError(f"bad precision band {self.precision_band}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.manifest is None and self.synthetic is None:
            raise ValueError("config needs either a manifest or a synthetic cohort")


_TUPLE_FIELDS = {
    "hu_window",
    "target_spacing_mm",
    "radius_factor_band",
    "froc_budgets",
    "precision_band",
    "external_cmd",
}


def config_from_dict(d: dict) -> PipelineConfig:
    """Build a config, rejecting unknown keys."""
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(d)
    for key in _TUPLE_FIELDS & set(kwargs):
        if kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


@dataclass
class PatientInput:
    patient_id: str
    index: int
    ct: VoxelGrid
    pet: VoxelGrid
    tumor: BinaryMask
    ln: BinaryMask
    streams: dict[str, VoxelGrid] | None = None  # four files, else oracle-synthesized
    phantom: object = None  # PhantomResult for synthetic patients


def _read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    patients = manifest.get("patients")
    if not isinstance(patients, list) or not patients:
        raise ValueError("manifest must contain a non-empty 'patients' list")
    base = path.parent
    out = []
    for entry in patients:
        e = dict(entry)
        for key in ("ct", "pet", "tumor", "ln"):
            if key not in e:
                raise ValueError(f"manifest patient {e.get('id')!r} missing {key!r}")
            e[key] = str(base / e[key])
        if e.get("streams"):
            if set(e["streams"]) != set(STREAM_KEYS):
                raise ValueError(
                    f"manifest patient {e.get('id')!r} streams must have keys {STREAM_KEYS}"
                )
            e["streams"] = {k: str(base / v) for k, v in e["streams"].items()}
        out.append(e)
    return out


def _load_patient(entry: dict, index: int) -> PatientInput:
    ct = read_volume(entry["ct"])
    pet = read_volume(entry["pet"])
    tumor = read_volume(entry["tumor"])
    ln = read_volume(entry["ln"])
    if not isinstance(tumor, BinaryMask) or not isinstance(ln, BinaryMask):
        raise ValueError(f"patient {entry.get('id')!r}: tumor and ln must be u8 mask VVOLs")
    streams = None
    if entry.get("streams"):
        streams = {k: read_volume(v) for k, v in entry["streams"].items()}
        for k, g in streams.items():
            if not isinstance(g, VoxelGrid) or g.kind != KIND_PROBABILITY:
                raise ValueError(f"stream {k} must be a probability VVOL")
    return PatientInput(str(entry.get("id", index)), index, ct, pet, tumor, ln, streams)


def _synthetic_patient(template: PhantomSpec, master_seed: int, index: int) -> PatientInput:
    ph = generate_phantom(cohort_spec(template, master_seed, index))
    p = PatientInput(f"p{index:04d}", index, ph.ct, ph.pet, ph.tumor, ph.ln, None)
    p.phantom = ph
    return p


def _patient_iter(config: PipelineConfig):
    """Yield loader callables so patients materialize lazily (and twice, cheaply)."""
    if config.manifest is not None:
        entries = _read_manifest(config.manifest)
        return [
            (lambda e=e, i=i: _load_patient(e, i)) for i, e in enumerate(entries)
        ]
    template = phantom_spec_from_dict(config.synthetic["template"])
    n = int(config.synthetic["patients"])
    if n < 1:
        raise ValueError("synthetic cohort needs at least one patient")
    return [
        (lambda i=i: _synthetic_patient(template, config.seed, i)) for i in range(n)
    ]


def _pet_stats(config: PipelineConfig, loaders) -> tuple[float, float]:
    if config.pet_mean is not None and config.pet_std is not None:
        return float(config.pet_mean), float(config.pet_std)
    grids = []
    for i, load in enumerate(loaders):
        try:
            p = load()
        except Exception as exc:  # unreadable patients fail (and get recorded) later
            log.warning("patient %d excluded from PET statistics: %s", i, exc)
            continue
        pet = p.pet
        if config.resample_inputs and pet.spacing != config.target_spacing_mm:
            pet = resample(pet, config.target_spacing_mm, "trilinear")
        grids.append(pet)
    if not grids:
        raise ValueError("no readable PET volumes; cannot pool cohort statistics")
    mean, std = compute_cohort_stats(grids)
    if std == 0.0:
        raise ValueError("cohort PET is constant; provide pet_mean/pet_std explicitly")
    return mean, std


def _synth_streams(patient: PatientInput, config: PipelineConfig) -> dict[str, VoxelGrid]:
    """One oracle realization per stream; a missing oracle means a silent stream."""
    from .phantom import oracle_probmap

    zero = VoxelGrid(
        np.zeros(patient.ct.values.shape, dtype=np.float32),
        patient.ct.spacing,
        patient.ct.origin,
        KIND_PROBABILITY,
    )
    maps = {}
    for tag, key, spec_dict in ((1, "ct", config.oracle_ct), (2, "ef", config.oracle_ef)):
        if spec_dict is None:
            maps[key] = zero
        else:
            spec = oracle_spec_from_dict(spec_dict)
            seed = derive_patient_seed(config.seed, patient.index, tag)
            maps[key] = oracle_probmap(patient.phantom, spec, seed=seed)
    return {
        "ct_prox": maps["ct"],
        "ef_prox": maps["ef"],
        "ct_dis": maps["ct"],
        "ef_dis": maps["ef"],
    }


def _process_patient(patient: PatientInput, config: PipelineConfig, pet_stats):
    target = config.target_spacing_mm
    ct, pet, tumor, ln = patient.ct, patient.pet, patient.tumor, patient.ln
    streams = patient.streams
    if config.resample_inputs and ct.spacing != target:
        ct = resample(ct, target, "trilinear")
        pet = resample(pet, target, "trilinear")
        tumor = resample(tumor, target, "nearest")
        ln = resample(ln, target, "nearest")
        if streams is not None:
            streams = {k: resample(g, target, "trilinear") for k, g in streams.items()}
    ct = truncate_hu(ct, *config.hu_window)
    pet_norm = normalize_pet(pet, *pet_stats)

    dmap = signed_edt(tumor)
    partition = stratify(dmap, config.d_mm)
    if streams is None:
        streams = _synth_streams(patient, config)
    stream_set = StreamSet(
        p_ct_prox=streams["ct_prox"],
        p_ef_prox=streams["ef_prox"],
        p_ct_dis=streams["ct_dis"],
        p_ef_dis=streams["ef_dis"],
        partition=partition,
    )
    fused = fuse_late(stream_set)
    cands = extract_candidates(
        fused,
        tau=config.tau,
        connectivity=config.connectivity,
        min_voxels=config.min_voxels,
        exclude_interior_of=dmap if config.exclude_tumor_interior else None,
    )
    gts = gt_instances(ln, config.connectivity)

    if config.scorer != "first-stage" and cands:
        patches = [refine.crop_patch(ct, pet_norm, c) for c in cands]
        patches = [
            refine.CandidatePatch(
                p.ct_patch,
                p.pet_patch,
                p.global_slice,
                refine.jitter_bboxes(
                    p.bboxes[0],
                    config.jitter_count,
                    config.jitter_range,
                    seed=derive_patient_seed(config.seed, patient.index, 100 + p.candidate_id),
                ),
                p.candidate_id,
                p.label,
            )
            for p in patches
        ]
        fallback = {c.id: c.score for c in cands}
        if config.scorer == "baseline":
            stats = refine.candidate_stats(cands, ct, pet_norm, dmap)
            model = refine.BaselineScorer(stats)
        else:
            model = refine.ExternalScorer(config.external_cmd)
        scores = refine.classify_candidates(patches, None, model, fallback)
        cands = refine.rescore_candidates(cands, scores)

    match = evaluate.match_instances(
        cands, gts, config.radius_factor_band, config.min_overlap_frac
    )
    labeled = [
        replace(c, label=bool(match.hit_flags.get(c.id, False))) if c.label is None else c
        for c in cands
    ]
    return patient.patient_id, labeled, gts


def run_pipeline(config: PipelineConfig) -> dict:
    """Run the cohort pipeline; returns the report dict and writes artifacts.

    Per-patient failures are logged and skipped; their ids appear under
    ``failed_patients`` in the report.  With identical config and seed the
    emitted CSV/JSON artifacts are byte-identical across runs.
    """
    loaders = _patient_iter(config)
    pet_stats = _pet_stats(config, loaders)

    results: dict[int, tuple] = {}
    failures: dict[int, str] = {}

    def work(i):
        patient = loaders[i]()
        return _process_patient(patient, config, pet_stats)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {i: pool.submit(work, i) for i in range(len(loaders))}
            for i, fut in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as exc:
                    log.error("patient %d failed: %s", i, exc)
                    failures[i] = str(exc)
    else:
        for i in range(len(loaders)):
            try:
                results[i] = work(i)
            except Exception as exc:
                log.error("patient %d failed: %s", i, exc)
                failures[i] = str(exc)

    ordered = [results[i] for i in sorted(results)]
    if not ordered:
        raise ValueError("every patient failed; nothing to evaluate")
    per_patient = [(cands, gts) for _, cands, gts in ordered]
    report = evaluate.build_report(
        per_patient,
        budgets=config.froc_budgets,
        operating_precision=config.operating_precision,
        precision_band=config.precision_band,
        radius_factor_band=config.radius_factor_band,
        min_overlap_frac=config.min_overlap_frac,
    )
    report["config"] = _config_echo(config)
    report["pet_stats"] = {"mean": pet_stats[0], "std": pet_stats[1]}
    report["patients"] = [
        {"id": pid, "n_candidates": len(cands), "n_gt": len(gts)}
        for pid, cands, gts in ordered
    ]
    report["failed_patients"] = [
        {"index": i, "error": failures[i]} for i in sorted(failures)
    ]

    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_candidates_csv(out / "candidates.csv", {pid: c for pid, c, _ in ordered})
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if config.figures:
            from .plots import render_report_figures

            render_report_figures(report, out, config.operating_precision)
    return report


def _config_echo(config: PipelineConfig) -> dict:
    echo = asdict(config)
    echo["defaults_doc"] = _CONFIG_DOC
    return echo
