"""Heterogeneous graph attention recommender with a decentralized
gradient-tracking training workbench."""

from .ehr_graph import (
    Claim,
    ClaimsSchema,
    EdgeKind,
    HeteroGraph,
    MaskedSplit,
    NodeKind,
    NodeRef,
    ServiceSubtype,
    SynthConfig,
    chronological_mask,
    ingest_claims,
    synthesize,
)
from .features import FeatureTable, init_features
from .hgat import HgatParams, ModelConfig, TaskBatch, model_forward, param_count
from .objectives import (
    HgatObjective,
    LocalObjective,
    LogisticRegularizedObjective,
    QuadraticObjective,
    auc,
    bpr_loss,
    combined_loss,
    cross_entropy,
    finite_difference_check,
    recall_at_mask,
)
from .topology import ConsensusMatrix, metropolis_weights, spectral_gap_lambda, step_size_bound, validate
from .fdl import RunResult, run
from .estimator import HgatRecommender

__version__ = "0.1.0"

__all__ = [
    "Claim",
    "ClaimsSchema",
    "ConsensusMatrix",
    "EdgeKind",
    "FeatureTable",
    "HeteroGraph",
    "HgatRecommender",
    "HgatObjective",
    "HgatParams",
    "LocalObjective",
    "LogisticRegularizedObjective",
    "MaskedSplit",
    "ModelConfig",
    "NodeKind",
    "NodeRef",
    "QuadraticObjective",
    "RunResult",
    "ServiceSubtype",
    "SynthConfig",
    "TaskBatch",
    "auc",
    "bpr_loss",
    "chronological_mask",
    "combined_loss",
    "cross_entropy",
    "finite_difference_check",
    "ingest_claims",
    "init_features",
    "metropolis_weights",
    "model_forward",
    "param_count",
    "recall_at_mask",
    "run",
    "spectral_gap_lambda",
    "step_size_bound",
    "synthesize",
    "validate",
]
