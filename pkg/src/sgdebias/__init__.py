"""Counterfactual debiasing toolkit for synthetic scene-graph prediction.

The package covers the full desk-scale loop: a seeded long-tailed relation
world, a branch-structured predicate model trained with manual gradients,
counterfactual effect scoring, ranking metrics, sentence-graph retrieval,
and a one-shot experiment driver with byte-stable artifacts.
"""

from .core import (
    BoundingBox,
    ConfigError,
    DataError,
    DetectedObject,
    NumericError,
    PairSample,
    RankedPredictions,
    SceneGraph,
    Vocabulary,
    canonical_order,
    make_ranked,
    validate_scene_graph,
)
from .effects import EffectKind, effect, unbiased_predict
from .experiment import ExperimentConfig, run_experiment
from .metrics import EvalReport, evaluate, mean_recall_at_k, recall_at_k, zero_shot_recall_at_k
from .model import CausalModel, Scenario, forward, init_model, load_checkpoint, save_checkpoint
from .retrieval import (
    HeteroVocab,
    RetrievalModel,
    SGEmbedConfig,
    TextDeriveConfig,
    derive_text_sg,
    embed_graph,
    init_retrieval_model,
    retrieval_eval,
    retrieve_train,
)
from .synth import Dataset, WorldConfig, build_world, generate_dataset, predicate_prior
from .train import TrainConfig, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CausalModel",
    "ConfigError",
    "DataError",
    "Dataset",
    "DetectedObject",
    "EffectKind",
    "EvalReport",
    "ExperimentConfig",
    "HeteroVocab",
    "NumericError",
    "PairSample",
    "RankedPredictions",
    "RetrievalModel",
    "SGEmbedConfig",
    "SceneGraph",
    "Scenario",
    "TextDeriveConfig",
    "TrainConfig",
    "Vocabulary",
    "WorldConfig",
    "build_world",
    "canonical_order",
    "derive_text_sg",
    "effect",
    "embed_graph",
    "evaluate",
    "forward",
    "generate_dataset",
    "gradient_check",
    "init_model",
    "init_retrieval_model",
    "load_checkpoint",
    "make_ranked",
    "mean_recall_at_k",
    "predicate_prior",
    "recall_at_k",
    "retrieval_eval",
    "retrieve_train",
    "run_experiment",
    "save_checkpoint",
    "train",
    "unbiased_predict",
    "validate_scene_graph",
    "zero_shot_recall_at_k",
]
