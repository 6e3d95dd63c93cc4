"""Masked-image-modeling OOD detection at desk scale.

Pipeline: MIM pretext pretraining on a toy patch transformer, label-smoothed
fine-tuning, pooled feature extraction, five OOD scores under one
"higher = more OOD" orientation, and threshold-free evaluation.
"""

from .datamodel import (
    FeatureSet,
    ImageDataset,
    RunManifest,
    generate_synthetic,
    read_feature_dump,
    write_feature_dump,
)
from .evaluate import (
    EvalReport,
    auroc,
    build_report,
    confusion_counts,
    fpr_at_tpr,
    histogram,
    threshold_at_tpr,
)
from .finetune import (
    FinetuneConfig,
    SmoothingConfig,
    classifier_head,
    classify_logits,
    cross_entropy,
    extract_features,
    finetune_classifier,
    smooth_labels,
)
from .gaussian import (
    GaussianModel,
    fit_gaussian,
    mahalanobis_score,
    mahalanobis_score_batch,
    predict_class,
)
from .mim import (
    Codebook,
    MaskSpec,
    ModelDims,
    PatchSequence,
    ToyMimModel,
    TrainConfig,
    build_codebook,
    forward_encoder,
    gradient_check,
    init_model,
    mim_loss,
    mim_loss_and_grad,
    patchify,
    sample_mask,
    train_mim,
    unpatchify,
)
from .scores import (
    ScoreVector,
    energy_score,
    entropy_score,
    gradnorm_score,
    msp_score,
    score_batch,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "EvalReport",
    "FeatureSet",
    "FinetuneConfig",
    "GaussianModel",
    "ImageDataset",
    "MaskSpec",
    "ModelDims",
    "PatchSequence",
    "RunManifest",
    "ScoreVector",
    "SmoothingConfig",
    "ToyMimModel",
    "TrainConfig",
    "auroc",
    "build_codebook",
    "build_report",
    "classifier_head",
    "classify_logits",
    "confusion_counts",
    "cross_entropy",
    "energy_score",
    "entropy_score",
    "extract_features",
    "finetune_classifier",
    "fit_gaussian",
    "forward_encoder",
    "fpr_at_tpr",
    "generate_synthetic",
    "gradient_check",
    "gradnorm_score",
    "histogram",
    "init_model",
    "mahalanobis_score",
    "mahalanobis_score_batch",
    "mim_loss",
    "mim_loss_and_grad",
    "msp_score",
    "patchify",
    "predict_class",
    "read_feature_dump",
    "sample_mask",
    "score_batch",
    "smooth_labels",
    "threshold_at_tpr",
    "train_mim",
    "unpatchify",
    "write_feature_dump",
    "__version__",
]
