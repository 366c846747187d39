"""Spatio-temporal graph transformer block and video-text alignment losses, in numpy."""

from .config import RunConfig
from .graph import SpatioTemporalGraph, build_graph
from .losses import EmbeddingPair, LossReport, csal_loss, total_loss, vtc_loss
from .numerics import ParamVector, finite_diff_grad
from .pipeline import Model, evaluate_retrieval, gen_corpus, init_params, train

__all__ = [
    "EmbeddingPair",
    "LossReport",
    "Model",
    "ParamVector",
    "RunConfig",
    "SpatioTemporalGraph",
    "build_graph",
    "csal_loss",
    "evaluate_retrieval",
    "finite_diff_grad",
    "gen_corpus",
    "init_params",
    "total_loss",
    "train",
    "vtc_loss",
]
