"""Curriculum-adaptive patch sampling for extremely sparse 3d detection,
with a small fully convolutional voxel classifier, candidate extraction,
and FROC scoring to close the loop end to end."""

from .errors import (
    FileFormatError,
    NonFiniteGradientError,
    NoPositivePatchesError,
    StaleCacheError,
    TrainingDivergedError,
)
from .evaluation import (
    TARGET_FP_RATES,
    FrocResult,
    HitCriterion,
    ReferenceNodule,
    ScanResult,
    cpm_score,
    evaluate_detections,
    froc_curve,
    match_candidates,
)
from .model import (
    FcnConfig,
    Weights,
    backward,
    bce_loss,
    forward,
    initialize_weights,
    load_checkpoint,
    save_checkpoint,
    sgd_nesterov_step,
)
from .patching import PatchGeometry, PatchIndex, classify_patch, enumerate_patches, extract_patch
from .pipeline import (
    CompareConfig,
    Dataset,
    TrainConfig,
    TrainResult,
    build_dataset,
    compare_samplers,
    predict_volume,
    standard_benchmark_config,
    train,
)
from .postprocess import Candidate, detect, read_candidates_csv, write_candidates_csv
from .sampler import (
    AdaptiveWeighting,
    CurriculumSchedule,
    PatchRecord,
    SamplerState,
    mixing_coefficient,
    patch_distribution,
    sample_batch,
)
from .volume import (
    Annotation,
    AnnotationSet,
    LabelMap,
    SyntheticSpec,
    Volume,
    load_annotations,
    load_labelmap,
    load_volume,
    rasterize_sphere,
    resample_isotropic,
    save_annotations,
    save_labelmap,
    save_volume,
    synthesize_case,
)

__version__ = "0.1.0"
