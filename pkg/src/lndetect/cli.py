"""Command-line interface.

Subcommands cover the individual pipeline steps (preprocess, distmap,
fuse, extract, match, froc), the synthetic cohort generator (phantom),
and the end-to-end batch runner (pipeline).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate
from .distance import DEFAULT_PROXIMAL_DISTANCE_MM, signed_edt, stratify
from .fusion import StreamSet, fuse_late
from .instances import (
    DEFAULT_CONNECTIVITY,
    DEFAULT_MIN_VOXELS,
    DEFAULT_TAU,
    extract_candidates,
    gt_instances,
    rasterize_sphere,
    read_candidates_csv,
    read_gt_csv,
    write_candidates_csv,
)
from .phantom import (
    cohort_spec,
    generate_phantom,
    load_oracle_spec,
    load_phantom_spec,
    oracle_probmap,
    derive_patient_seed,
)
from .pipeline import config_from_dict, load_config, run_pipeline
from .preprocess import (
    DEFAULT_HU_WINDOW,
    DEFAULT_TARGET_SPACING,
    normalize_pet,
    resample,
    truncate_hu,
)
from .volume import BinaryMask, VoxelGrid, read_volume, write_volume


def _add_preprocess(sub):
    p = sub.add_parser(
        "preprocess",
        help="resample a volume and apply kind-specific intensity preprocessing",
    )
    p.add_argument("--input", required=True, help="input VVOL file")
    p.add_argument("--output", required=True, help="output VVOL file")
    p.add_argument(
        "--target-spacing",
        nargs=3,
        type=float,
        default=list(DEFAULT_TARGET_SPACING),
        metavar=("SX", "SY", "SZ"),
        help="resampling grid in mm (default 1 1 2.5; masks use nearest-neighbor)",
    )
    p.add_argument(
        "--hu-window",
        nargs=2,
        type=float,
        default=list(DEFAULT_HU_WINDOW),
        metavar=("LO", "HI"),
        help="CT clamp window in HU, applied to ct-hu inputs (default -200 300)",
    )
    p.add_argument("--pet-mean", type=float, default=None, help="cohort PET mean for z-scoring")
    p.add_argument("--pet-std", type=float, default=None, help="cohort PET std for z-scoring")
    p.set_defaults(func=_cmd_preprocess)


def _cmd_preprocess(args) -> int:
    grid = read_volume(args.input)
    interp = "nearest" if isinstance(grid, BinaryMask) else "trilinear"
    grid = resample(grid, tuple(args.target_spacing), interp)
    if isinstance(grid, VoxelGrid) and grid.kind == "ct-hu":
        grid = truncate_hu(grid, *args.hu_window)
    elif isinstance(grid, VoxelGrid) and grid.kind == "pet-suv":
        if args.pet_mean is not None and args.pet_std is not None:
            grid = normalize_pet(grid, args.pet_mean, args.pet_std)
    write_volume(grid, args.output)
    return 0


def _add_distmap(sub):
    p = sub.add_parser(
        "distmap", help="signed Euclidean distance to the tumor surface (mm)"
    )
    p.add_argument("--tumor", required=True, help="tumor mask VVOL (u8)")
    p.add_argument("--output", required=True, help="distance-mm VVOL to write")
    p.add_argument(
        "--d-mm",
        type=float,
        default=DEFAULT_PROXIMAL_DISTANCE_MM,
        help="proximal/distal split distance in mm (default 70)",
    )
    p.add_argument("--proximal-out", default=None, help="optional proximal-region mask VVOL")
    p.add_argument("--distal-out", default=None, help="optional distal-region mask VVOL")
    p.set_defaults(func=_cmd_distmap)


def _cmd_distmap(args) -> int:
    tumor = read_volume(args.tumor)
    if not isinstance(tumor, BinaryMask):
        raise SystemExit("--tumor must be a u8 mask VVOL")
    dmap = signed_edt(tumor)
    write_volume(dmap.grid, args.output)
    if args.proximal_out or args.distal_out:
        part = stratify(dmap, args.d_mm)
        if args.proximal_out:
            write_volume(part.proximal, args.proximal_out)
        if args.distal_out:
            write_volume(part.distal, args.distal_out)
    return 0


def _add_fuse(sub):
    p = sub.add_parser(
        "fuse",
        help="late-fuse the four stream probability volumes over the region partition",
    )
    p.add_argument("--ct-prox", required=True)
    p.add_argument("--ef-prox", required=True)
    p.add_argument("--ct-dis", required=True)
    p.add_argument("--ef-dis", required=True)
    p.add_argument("--proximal", help="proximal-region mask VVOL")
    p.add_argument("--distal", help="distal-region mask VVOL")
    p.add_argument("--dmap", help="alternative: distance VVOL to split at --d-mm")
    p.add_argument("--d-mm", type=float, default=DEFAULT_PROXIMAL_DISTANCE_MM)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_fuse)


def _cmd_fuse(args) -> int:
    from .distance import RegionPartition, SignedDistanceMap

    grids = {k: read_volume(getattr(args, k)) for k in ("ct_prox", "ef_prox", "ct_dis", "ef_dis")}
    if args.proximal and args.distal:
        prox = read_volume(args.proximal)
        dis = read_volume(args.distal)
        partition = RegionPartition(prox, dis, float("nan"))
    elif args.dmap:
        grid = read_volume(args.dmap)
        if not isinstance(grid, VoxelGrid) or grid.kind != "distance-mm":
            raise SystemExit("--dmap must be a distance-mm VVOL")
        partition = stratify(SignedDistanceMap(grid, 1), args.d_mm)
    else:
        raise SystemExit("provide either --proximal and --distal, or --dmap")
    fused = fuse_late(
        StreamSet(
            p_ct_prox=grids["ct_prox"],
            p_ef_prox=grids["ef_prox"],
            p_ct_dis=grids["ct_dis"],
            p_ef_dis=grids["ef_dis"],
            partition=partition,
        )
    )
    write_volume(fused, args.output)
    return 0


def _add_extract(sub):
    p = sub.add_parser(
        "extract", help="threshold a probability volume and emit measured candidates"
    )
    p.add_argument("--prob", required=True, help="probability VVOL")
    p.add_argument("--patient-id", required=True)
    p.add_argument("--output", required=True, help="candidates CSV")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="threshold (default 0.5)")
    p.add_argument(
        "--connectivity",
        type=int,
        default=DEFAULT_CONNECTIVITY,
        choices=(6, 18, 26),
        help="labeling connectivity (default 26)",
    )
    p.add_argument(
        "--min-voxels",
        type=int,
        default=DEFAULT_MIN_VOXELS,
        help="discard smaller components (default 8)",
    )
    p.add_argument(
        "--exclude-dmap",
        default=None,
        help="distance VVOL; foreground strictly inside the tumor is removed",
    )
    p.set_defaults(func=_cmd_extract)


def _cmd_extract(args) -> int:
    from .distance import SignedDistanceMap

    prob = read_volume(args.prob)
    exclude = None
    if args.exclude_dmap:
        grid = read_volume(args.exclude_dmap)
        exclude = SignedDistanceMap(grid, 1)
    cands = extract_candidates(
        prob,
        tau=args.tau,
        connectivity=args.connectivity,
        min_voxels=args.min_voxels,
        exclude_interior_of=exclude,
    )
    write_candidates_csv(args.output, {args.patient_id: cands})
    return 0


def _rehydrate(instances, geom):
    """Give CSV-loaded instances sphere-rasterized voxel sets on geom."""
    out = []
    for inst in instances:
        if inst.voxel_indices is None:
            lin = rasterize_sphere(inst.centroid_mm, inst.radius_mm, geom)
            from dataclasses import replace

            inst = replace(inst, voxel_indices=lin)
        out.append(inst)
    return out


class _CsvGeometry:
    """Minimal geometry for rasterizing CSV-only instances."""

    def __init__(self, spacing, instances):
        self.spacing = tuple(spacing)
        self.origin = (0.0, 0.0, 0.0)
        hi = [1.0, 1.0, 1.0]
        for inst in instances:
            for ax in range(3):
                hi[ax] = max(hi[ax], inst.centroid_mm[ax] + inst.radius_mm + self.spacing[ax])
        self.dims = tuple(int(np.ceil(h / s)) + 1 for h, s in zip(hi, self.spacing))


def _add_match(sub):
    p = sub.add_parser("match", help="hit-match one patient's candidates against ground truth")
    p.add_argument("--candidates", required=True, help="candidates CSV")
    p.add_argument("--patient-id", required=True)
    p.add_argument("--gt", required=True, help="GT mask VVOL (u8) or GT CSV")
    p.add_argument("--output", required=True, help="match JSON")
    p.add_argument(
        "--radius-band",
        nargs=2,
        type=float,
        default=[0.5, 1.5],
        help="allowed candidate/GT radius factor, inclusive (default 0.5 1.5)",
    )
    p.add_argument(
        "--min-overlap",
        type=float,
        default=0.0,
        help="minimum overlap as a fraction of GT voxels (default: any shared voxel)",
    )
    p.add_argument(
        "--spacing",
        nargs=3,
        type=float,
        default=list(DEFAULT_TARGET_SPACING),
        help="rasterization spacing when both sides come from CSV",
    )
    p.set_defaults(func=_cmd_match)


def _cmd_match(args) -> int:
    cands = read_candidates_csv(args.candidates).get(args.patient_id, [])
    if args.gt.endswith(".csv"):
        gts = read_gt_csv(args.gt).get(args.patient_id, [])
        geom = _CsvGeometry(args.spacing, list(cands) + list(gts))
        gts = _rehydrate(gts, geom)
    else:
        mask = read_volume(args.gt)
        if not isinstance(mask, BinaryMask):
            raise SystemExit("--gt VVOL must be a u8 mask")
        gts = gt_instances(mask)
        geom = mask
    cands = _rehydrate(cands, geom)
    result = evaluate.match_instances(cands, gts, tuple(args.radius_band), args.min_overlap)
    payload = {
        "patient_id": args.patient_id,
        "pairs": [list(p) for p in result.pairs],
        "false_positives": list(result.unmatched_candidates),
        "false_negatives": list(result.unmatched_gts),
        "hit_flags": {str(k): v for k, v in sorted(result.hit_flags.items())},
    }
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _add_froc(sub):
    p = sub.add_parser(
        "froc", help="cohort PR/FROC report from a candidates CSV plus ground truth"
    )
    p.add_argument("--candidates", required=True, help="candidates CSV (all patients)")
    p.add_argument("--gt", default=None, help="GT CSV covering all patients")
    p.add_argument("--gt-dir", default=None, help="directory of per-patient GT mask VVOLs")
    p.add_argument(
        "--gt-pattern",
        default="{patient}.vvol",
        help="filename pattern inside --gt-dir (default '{patient}.vvol')",
    )
    p.add_argument("--output", required=True, help="report JSON")
    p.add_argument("--curves", default=None, help="optional SVG file for the curves")
    p.add_argument(
        "--budgets",
        nargs="+",
        type=float,
        default=[2.0, 3.0, 4.0, 6.0],
        help="FP-per-patient budgets for mFROC (default 2 3 4 6)",
    )
    p.add_argument(
        "--operating-precision",
        type=float,
        default=0.15,
        help="precision for operating-threshold selection (default 0.15)",
    )
    p.add_argument(
        "--spacing",
        nargs=3,
        type=float,
        default=list(DEFAULT_TARGET_SPACING),
        help="rasterization spacing when ground truth comes from CSV",
    )
    p.set_defaults(func=_cmd_froc)


def _cmd_froc(args) -> int:
    cands_by_pid = read_candidates_csv(args.candidates)
    per_patient = []
    if args.gt:
        gts_by_pid = read_gt_csv(args.gt)
        pids = sorted(set(cands_by_pid) | set(gts_by_pid))
        for pid in pids:
            cands = cands_by_pid.get(pid, [])
            gts = gts_by_pid.get(pid, [])
            geom = _CsvGeometry(args.spacing, list(cands) + list(gts))
            per_patient.append((_rehydrate(cands, geom), _rehydrate(gts, geom)))
    elif args.gt_dir:
        gt_dir = Path(args.gt_dir)
        for pid in sorted(cands_by_pid):
            mask = read_volume(gt_dir / args.gt_pattern.format(patient=pid))
            if not isinstance(mask, BinaryMask):
                raise SystemExit(f"GT for patient {pid} must be a u8 mask VVOL")
            per_patient.append((_rehydrate(cands_by_pid[pid], mask), gt_instances(mask)))
    else:
        raise SystemExit("provide --gt (CSV) or --gt-dir (mask VVOLs)")
    report = evaluate.build_report(
        per_patient,
        budgets=tuple(args.budgets),
        operating_precision=args.operating_precision,
    )
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.curves:
        from .plots import render_froc_curve

        render_froc_curve(
            [(p["fp_per_patient"], p["recall"]) for p in report["froc"]],
            args.curves,
            tuple(args.budgets),
            {float(k): v for k, v in report["froc_at_budgets"].items()},
        )
    return 0


def _add_phantom(sub):
    p = sub.add_parser(
        "phantom", help="generate a synthetic patient cohort with exact ground truth"
    )
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", required=True, help="phantom template JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--oracle-ct", default=None, help="oracle spec JSON for the CT stream (else silent)"
    )
    p.add_argument(
        "--oracle-ef", default=None, help="oracle spec JSON for the early-fusion stream"
    )
    p.set_defaults(func=_cmd_phantom)


def _cmd_phantom(args) -> int:
    template = load_phantom_spec(args.spec)
    oracles = {}
    if args.oracle_ct:
        oracles["ct"] = load_oracle_spec(args.oracle_ct)
    if args.oracle_ef:
        oracles["ef"] = load_oracle_spec(args.oracle_ef)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "patients": []}
    for i in range(args.patients):
        ph = generate_phantom(cohort_spec(template, args.seed, i))
        pid = f"p{i:04d}"
        entry = {"id": pid}
        for key, vol in (
            ("ct", ph.ct),
            ("pet", ph.pet),
            ("tumor", ph.tumor),
            ("ln", ph.ln),
        ):
            name = f"{pid}_{key}.vvol"
            write_volume(vol, out / name)
            entry[key] = name
        if oracles:
            maps = {}
            for tag, key in ((1, "ct"), (2, "ef")):
                if key in oracles:
                    maps[key] = oracle_probmap(
                        ph, oracles[key], seed=derive_patient_seed(args.seed, i, tag)
                    )
                else:
                    maps[key] = VoxelGrid(
                        np.zeros(ph.ct.values.shape, dtype=np.float32),
                        ph.ct.spacing,
                        ph.ct.origin,
                        "probability",
                    )
            streams = {}
            for skey, mkey in (
                ("ct_prox", "ct"),
                ("ef_prox", "ef"),
                ("ct_dis", "ct"),
                ("ef_dis", "ef"),
            ):
                name = f"{pid}_{skey}.vvol"
                write_volume(maps[mkey], out / name)
                streams[skey] = name
            entry["streams"] = streams
        entry["gt"] = [
            {
                "id": g.id,
                "center_mm": list(g.centroid_mm),
                "radius_mm": g.radius_mm,
                "volume_mm3": g.volume_mm3,
            }
            for g in ph.gt
        ]
        manifest["patients"].append(entry)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _add_pipeline(sub):
    p = sub.add_parser("pipeline", help="run the full two-stage pipeline over a cohort")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--manifest", default=None, help="override the config's manifest path")
    p.add_argument("--out", default=None, help="override the config's output directory")
    p.set_defaults(func=_cmd_pipeline)


def _cmd_pipeline(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.manifest:
        overrides["manifest"] = args.manifest
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        from dataclasses import asdict

        merged = asdict(config)
        merged.update(overrides)
        config = config_from_dict(merged)
    report = run_pipeline(config)
    if report["failed_patients"]:
        print(
            f"{len(report['failed_patients'])} patient(s) failed; see report.json",
            file=sys.stderr,
        )
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lndetect",
        description=(
            "Distance-stratified lymph node detection toolkit: candidate "
            "generation from fused CT/PET probability volumes, second-stage "
            "rescoring plumbing, and FROC evaluation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_preprocess(sub)
    _add_distmap(sub)
    _add_fuse(sub)
    _add_extract(sub)
    _add_match(sub)
    _add_froc(sub)
    _add_phantom(sub)
    _add_pipeline(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
