"""Weighted-ensemble self-distillation at desk scale.

A single representation encoder is trained against an ensemble of
projection heads and codebooks under a family of data-dependent weighted
cross-entropy losses, with property-tested math throughout: gradient
identities, convexity orderings, entropy-variance bounds, and
Hungarian-aligned ensemble-diversity analysis.
"""

import os as _os

# Cap BLAS worker threads before numpy loads anywhere in the package.
# Library users who imported numpy first are unaffected (documented CLI knob).
if "ENSD_THREADS" in _os.environ:
    _n = _os.environ["ENSD_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

from .data import Dataset, ViewBatch, gen_gaussian_mixture, load_csv, make_views, save_csv
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    DivergenceError,
    EnsdistillError,
    GraphError,
    InvalidMaskError,
    ShapeError,
)
from .estimator import CosineKnnClassifier, EnsembleDistiller, LinearProbeClassifier
from .evaluate import (
    ReprBank,
    build_bank,
    code_alignment,
    diversity_report,
    extract_representations,
    fewshot_split,
    hungarian_max,
    knn_predict,
    knn_predict_batch,
    linear_probe,
)
from .losses import (
    SCHEME_TAGS,
    WeightingScheme,
    compute_weights,
    ensemble_loss,
    ensemble_loss_value,
    loss_ent_fast,
    loss_prob_fast,
    loss_unif_fast,
    scheme_f,
    scheme_weights,
    verify_bound_ordering,
    verify_prob_identity,
)
from .measures import (
    entropy,
    entropy_from_logs,
    entropy_variance_bound_gap,
    index_variance,
    kl_from_logs,
    unnorm_cross_entropy,
    unnorm_kl,
)
from .model import (
    ModelDims,
    ModelParams,
    TeacherState,
    ema_update,
    init_params,
    load_checkpoint,
    save_checkpoint,
    student_logprobs,
    teacher_logprobs,
)
from .regularize import CenterState, center_apply, center_update, memax_term, sinkhorn
from .train import (
    FitResult,
    OptState,
    TrainConfig,
    adamw_step,
    cosine_schedule,
    fit,
    linear_schedule,
    train_step,
)

__version__ = "0.1.0"
