"""Multi-modal fact-verification fusion engine.

Ingests token-level embeddings for a claim and a document (text and image
each), fuses them with bidirectional multi-head co-attention, classifies
the pair into five entailment categories, and combines trained models with
a power-weighted ensemble. Built on an in-package reverse-mode autodiff
core; no deep-learning framework required.
"""
from .autodiff import Node, Tensor, backward
from .coattention import CoAttentionParams, TokenSequence, co_attend
from .ensemble import EnsembleConfig, PredictionSet, combine, grid_search
from .errors import PrecofactError
from .metrics import EvalReport, argmax_predict, evaluate
from .model import (
    CLASS_NAMES,
    ModelConfig,
    ModelParams,
    SampleEmbeddings,
    forward,
    init_model_params,
)
from .training import TrainConfig, cross_entropy, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "CoAttentionParams",
    "EnsembleConfig",
    "EvalReport",
    "ModelConfig",
    "ModelParams",
    "Node",
    "PredictionSet",
    "PrecofactError",
    "SampleEmbeddings",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "argmax_predict",
    "backward",
    "co_attend",
    "combine",
    "cross_entropy",
    "evaluate",
    "forward",
    "grid_search",
    "init_model_params",
    "train",
]
