"""Distance-stratified lymph node detection toolkit for CT/PET volumes."""

from .distance import (
    DEFAULT_PROXIMAL_DISTANCE_MM,
    RegionPartition,
    SignedDistanceMap,
    extract_boundary,
    signed_edt,
    stratify,
)
from .evaluate import (
    BandRecall,
    FrocCurve,
    MatchResult,
    PrCurve,
    best_f1,
    build_report,
    froc_curve,
    match_instances,
    mfroc,
    pr_curve,
    recall_at_precision,
    select_operating_threshold,
)
from .fusion import StreamSet, fuse_category, fuse_late, restrict_to_region
from .instances import (
    GroundTruthInstance,
    InstanceCandidate,
    binarize,
    connected_components,
    extract_candidates,
    gt_instances,
)
from .phantom import (
    Ellipsoid,
    OracleSpec,
    PhantomSpec,
    SphereNode,
    generate_phantom,
    oracle_probmap,
)
from .pipeline import PipelineConfig, config_from_dict, run_pipeline
from .preprocess import (
    compute_cohort_stats,
    normalize_pet,
    resample,
    tile_aggregate,
    truncate_hu,
)
from .refine import (
    BaselineScorer,
    CandidatePatch,
    ClassifierScore,
    ExternalScorer,
    FeatureBundle,
    assemble_feature,
    augment_patch,
    classify_candidates,
    crop_global_slice,
    crop_patch,
    jitter_bboxes,
)
from .volume import BinaryMask, VoxelGrid, VvolError, read_volume, write_volume

__version__ = "0.1.0"
