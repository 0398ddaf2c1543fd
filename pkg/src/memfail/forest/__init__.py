"""Random forest classifier (CART, Gini, bagging, feature subsampling)."""

from memfail.forest.model import (
    MODEL_FORMAT,
    Classifier,
    DecisionTree,
    ForestParams,
    ModelVersionError,
    TrainedForest,
    feature_importance,
    fit,
    gini,
    predict_proba,
    train,
)
from memfail.forest.predict import DimmVerdict, first_alarm, predict_dimm

__all__ = [
    "MODEL_FORMAT",
    "Classifier",
    "DecisionTree",
    "DimmVerdict",
    "ForestParams",
    "ModelVersionError",
    "TrainedForest",
    "feature_importance",
    "first_alarm",
    "fit",
    "gini",
    "predict_dimm",
    "predict_proba",
    "train",
]
