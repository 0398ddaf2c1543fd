"""Incremental feature engine over the window W and history H."""

from memfail.fengine.batch import batch_prefixes, batch_recompute
from memfail.fengine.catalog import (
    CATALOG_VERSION,
    EPSILON,
    FEATURE_INDEX,
    FEATURE_NAMES,
    INTEGER_MASK,
    N_FEATURES,
    WINDOW_MASK,
    FeatureSpec,
    catalog,
    render_catalog,
)
from memfail.fengine.io import read_feature_csv, write_feature_csv, FeatureTable
from memfail.fengine.state import (
    DEFAULT_KEY_CAP,
    MODES,
    DimmState,
    OrderingError,
    WindowConfig,
    apply_mode,
    extract_stream,
)

__all__ = [
    "CATALOG_VERSION",
    "DEFAULT_KEY_CAP",
    "EPSILON",
    "FEATURE_INDEX",
    "FEATURE_NAMES",
    "INTEGER_MASK",
    "MODES",
    "N_FEATURES",
    "WINDOW_MASK",
    "DimmState",
    "FeatureSpec",
    "FeatureTable",
    "OrderingError",
    "WindowConfig",
    "apply_mode",
    "batch_prefixes",
    "batch_recompute",
    "catalog",
    "extract_stream",
    "read_feature_csv",
    "render_catalog",
    "write_feature_csv",
]
