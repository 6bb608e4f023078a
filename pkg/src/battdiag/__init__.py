"""battdiag: physics-informed EV battery fault diagnosis pipeline.

Three layers: mechanism-driven feature extraction from charging
segments, gradient-boosted detection with exact Shapley attribution,
and a knowledge-grounded reasoning layer producing calibrated
structured diagnosis reports.
"""

from .agent import (
    DiagnoseConfig,
    DiagnosisReport,
    DiagnosticPrompt,
    GateDecision,
    NoLikelihoods,
    ParseFailure,
    Prediction,
    ProviderError,
    ProviderResponse,
    build_prompt,
    calibrate,
    diagnose,
    diagnose_batch,
    parse_report,
    refinement_gate,
)
from .attribution import (
    Attribution,
    TreeShapExplainer,
    brute_force_shap,
    select_top_k,
    tree_shap,
)
from .data_model import (
    ChargingSegment,
    FleetDataset,
    SplitAssignment,
    ValidationError,
    load_segments,
    partition_by_vehicle,
    read_segment_csv,
    write_fleet,
    write_segment_csv,
)
from .features import (
    FEATURE_NAMES,
    FeatureVector,
    PhaseBoundary,
    detect_phase_boundary,
    extract_features,
    featurize_segment,
    featurize_segments,
)
from .gbdt import TrainConfig, TreeEnsemble, TreeNode, train
from .knowledge import (
    FaultType,
    KnowledgeBase,
    candidate_faults,
    load_knowledge_base,
    lookup,
)
from .metrics import CostParams, OutcomeTally, auroc, average_cost, tally_outcomes
from .providers import HttpProvider, MockProvider
from .synth import FleetSpec, generate_fleet

__version__ = "0.1.0"

__all__ = [
    "Attribution",
    "ChargingSegment",
    "CostParams",
    "DiagnoseConfig",
    "DiagnosisReport",
    "DiagnosticPrompt",
    "FEATURE_NAMES",
    "FaultType",
    "FeatureVector",
    "FleetDataset",
    "FleetSpec",
    "GateDecision",
    "HttpProvider",
    "KnowledgeBase",
    "MockProvider",
    "NoLikelihoods",
    "OutcomeTally",
    "ParseFailure",
    "PhaseBoundary",
    "Prediction",
    "ProviderError",
    "ProviderResponse",
    "SplitAssignment",
    "TrainConfig",
    "TreeEnsemble",
    "TreeNode",
    "TreeShapExplainer",
    "ValidationError",
    "auroc",
    "average_cost",
    "brute_force_shap",
    "build_prompt",
    "calibrate",
    "candidate_faults",
    "detect_phase_boundary",
    "diagnose",
    "diagnose_batch",
    "extract_features",
    "featurize_segment",
    "featurize_segments",
    "generate_fleet",
    "load_knowledge_base",
    "load_segments",
    "lookup",
    "parse_report",
    "partition_by_vehicle",
    "read_segment_csv",
    "refinement_gate",
    "select_top_k",
    "tally_outcomes",
    "train",
    "tree_shap",
    "write_fleet",
    "write_segment_csv",
]
