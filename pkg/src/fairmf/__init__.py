"""Fairness-regularised implicit matrix factorisation: iALS and fiADMM solvers,
top-K evaluation with exposure fairness, and convergence diagnostics."""

__version__ = "0.1.0"

from .factors import RegWeights, frequency_weights, gramian, score_topk
from .fiadmm import AdmmState, DivergenceError, EpochTrace, fold_in, prox_map, train_fiadmm
from .ials import IalsModel, fold_in_ials, ials_loss, train_ials
from .interactions import (
    InteractionFormatError,
    SparseBinaryMatrix,
    SplitSpec,
    binarize_and_filter,
    load_interactions,
    strong_generalization_split,
)
from .metrics import EvalReport, gini_index, ndcg_at_k, recall_at_k
from .params import HyperParams

__all__ = [
    "AdmmState", "DivergenceError", "EpochTrace", "EvalReport", "HyperParams", "IalsModel",
    "InteractionFormatError", "RegWeights", "SparseBinaryMatrix", "SplitSpec", "binarize_and_filter",
    "fold_in", "fold_in_ials", "frequency_weights", "gini_index", "gramian", "ials_loss",
    "load_interactions", "ndcg_at_k", "prox_map", "recall_at_k", "score_topk",
    "strong_generalization_split", "train_fiadmm", "train_ials",
]
