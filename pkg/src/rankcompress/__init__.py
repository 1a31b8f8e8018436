"""Budgeted low-rank compression of CNNs: Tucker-2 / SVD factorization,
per-layer proxy tables and an exact rank-selection search."""

__version__ = "0.1.0"

from .architectures import ARCHITECTURES, build_arch
from .decompose import ProposalGrid, RankProposal, decompose_layer, layer_proposals, param_delta, propose_ranks
from .errors import InfeasibleBudgetError, ManifestError, NumericError, ShapeError
from .estimators import CalibrationConfig, CandidateEntry, CandidateTable, build_tables, load_tables, save_tables
from .evbmf import evbmf_rank, evbmf_tucker_ranks
from .infer import forward, forward_traced
from .model_ir import ModelIR, deserialize, param_count, serialize
from .pipeline import apply_plan, compare_models, evbmf_plan, rewrite
from .search import Budget, RankPlan, SearchConfig, min_achievable_size, solve, topk

__all__ = [
    "ARCHITECTURES", "build_arch",
    "ProposalGrid", "RankProposal", "decompose_layer", "layer_proposals", "param_delta", "propose_ranks",
    "InfeasibleBudgetError", "ManifestError", "NumericError", "ShapeError",
    "CalibrationConfig", "CandidateEntry", "CandidateTable", "build_tables", "load_tables", "save_tables",
    "evbmf_rank", "evbmf_tucker_ranks",
    "forward", "forward_traced",
    "ModelIR", "deserialize", "param_count", "serialize",
    "apply_plan", "compare_models", "evbmf_plan", "rewrite",
    "Budget", "RankPlan", "SearchConfig", "min_achievable_size", "solve", "topk",
]
