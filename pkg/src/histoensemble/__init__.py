"""Deep-feature ensembles for histopathology image classification.

Truncated CNN backbones turn images into feature vectors, six classical
classifiers are trained on them, the best three (High-Performance
Filtering) form hard and soft voting committees, and the best committee and
backbone are evaluated with cross-validated metrics.
"""

from .classifiers import REGISTRY, ClassifierSpec, TrainedModel, predict, predict_proba, train
from .data import (
    COLON_LABELS,
    LUNG_COLON_LABELS,
    LUNG_LABELS,
    DatasetManifest,
    FoldPlan,
    ImageSample,
    LabelMap,
    make_folds,
    preprocess_image,
    scan_dataset,
    stratified_split,
)
from .ensemble import (
    EnsembleModel,
    HPFSelection,
    Leaderboard,
    build_leaderboard,
    ensemble_predict,
    hard_vote,
    select_top_k,
    soft_vote,
)
from .experiment import ExperimentConfig, ExperimentResult, load_config, predict_single, run_experiment
from .features import BackboneSpec, FeatureMatrix, cache_features, extract_features, feature_dim, load_features
from .metrics import (
    ConfusionMatrix,
    MetricsBundle,
    classification_metrics,
    confusion,
    cross_validate,
    regression_errors,
    roc_auc,
)

__version__ = "0.1.0"

__all__ = [
    "REGISTRY",
    "ClassifierSpec",
    "TrainedModel",
    "predict",
    "predict_proba",
    "train",
    "COLON_LABELS",
    "LUNG_COLON_LABELS",
    "LUNG_LABELS",
    "DatasetManifest",
    "FoldPlan",
    "ImageSample",
    "LabelMap",
    "make_folds",
    "preprocess_image",
    "scan_dataset",
    "stratified_split",
    "EnsembleModel",
    "HPFSelection",
    "Leaderboard",
    "build_leaderboard",
    "ensemble_predict",
    "hard_vote",
    "select_top_k",
    "soft_vote",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "predict_single",
    "run_experiment",
    "BackboneSpec",
    "FeatureMatrix",
    "cache_features",
    "extract_features",
    "feature_dim",
    "load_features",
    "ConfusionMatrix",
    "MetricsBundle",
    "classification_metrics",
    "confusion",
    "cross_validate",
    "regression_errors",
    "roc_auc",
]
