"""Covariate-adaptive randomization and stratified treatment-effect inference."""

from .errors import StrataInferError
from .estimators import Method
from .pipeline import AnalysisResult, SparseMode, analyze
from .sparse import ClusterMap
from .trial_data import Dataset, DesignTargets, summarize
from .variance import Family

__version__ = "0.1.0"

__all__ = ["AnalysisResult", "ClusterMap", "Dataset", "DesignTargets", "Family",
           "Method", "SparseMode", "StrataInferError", "analyze", "summarize"]
