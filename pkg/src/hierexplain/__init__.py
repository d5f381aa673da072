"""Hierarchy-aware explanations for hierarchical time-series forecasters."""

from .attribution import AttributionConfig, ImportanceTensor, attribute
from .benchgen import (AnomalySpec, BenchmarkConfig, GroundTruthManifest, PlacementSpec,
                       build_synthetic_panel, gen_anomaly, inject_into_real)
from .forecaster import Forecaster, ForecasterSpec, OutputTarget, train
from .hier_explain import HierConfig, HierImportanceMap, explain, flat_scores, subtree_scores
from .hierarchy import HierarchyTree
from .metrics import MetricReport, delta_eval, evda, ias_normalize, ias_score
from .panel import SeriesPanel, WindowTask, load_panel, split
from .prob_explain import QuantileTarget, explain_quantile

__version__ = "0.1.0"
