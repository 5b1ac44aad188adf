"""Pairwise mergeability metrics, merge operators and merge-performance predictors."""
from .errors import MergeProbeError
from .metrics import CATEGORIES, CATEGORY_METRICS, METRIC_NAMES, MetricConfig, MetricVector, compute_metric_vector
from .tensorstore import ParamMap, ProbeSet, load_pack, save_pack, task_vector

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "CATEGORY_METRICS",
    "METRIC_NAMES",
    "MergeProbeError",
    "MetricConfig",
    "MetricVector",
    "ParamMap",
    "ProbeSet",
    "compute_metric_vector",
    "load_pack",
    "save_pack",
    "task_vector",
]
