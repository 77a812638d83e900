"""Wildfire susceptibility modelling: random forests, exact Shapley
explanations, spatial/temporal validation and risk zonation."""

__version__ = "0.1.0"

from firerisk.data import (
    CANONICAL_FEATURES,
    Dataset,
    FeatureSchema,
    Sample,
    Stratum,
    balanced_absence_sample,
    parse_samples_csv,
    positive_rate,
    stratify,
    write_samples_csv,
)
from firerisk.errors import DataError, FireRiskError, ModelError, RasterError, ValidationError
from firerisk.forest import (
    Forest,
    ForestParams,
    Tree,
    predict_label,
    predict_proba,
    train_forest,
    train_tree,
)

__all__ = [
    "CANONICAL_FEATURES",
    "Dataset",
    "DataError",
    "FeatureSchema",
    "FireRiskError",
    "Forest",
    "ForestParams",
    "ModelError",
    "RasterError",
    "Sample",
    "Stratum",
    "Tree",
    "ValidationError",
    "balanced_absence_sample",
    "parse_samples_csv",
    "positive_rate",
    "predict_label",
    "predict_proba",
    "stratify",
    "train_forest",
    "train_tree",
    "write_samples_csv",
]
