"""gkfusion: relation-weight extraction over masked-sentence embeddings,
a reusable general-knowledge embedding store, and graph-fusion
entity/relation extraction."""

__version__ = "0.1.0"

from .embeddings import FileEmbeddingStore, ToyAdditiveEmbedder, store_load, store_save
from .gkstore import GKStore, GKTrainConfig, gk_load, gk_save, train_gk
from .relweights import (
    Entity,
    RelationType,
    Triple,
    build_masked_sentences,
    normalize_weights,
    predict_relation,
    triple_weight,
)
from .synthgen import gen_synthetic
from .taskfusion import TaskDocument, TaskTrainConfig, evaluate, train_task

__all__ = [
    "Entity",
    "FileEmbeddingStore",
    "GKStore",
    "GKTrainConfig",
    "RelationType",
    "TaskDocument",
    "TaskTrainConfig",
    "ToyAdditiveEmbedder",
    "Triple",
    "build_masked_sentences",
    "evaluate",
    "gen_synthetic",
    "gk_load",
    "gk_save",
    "normalize_weights",
    "predict_relation",
    "store_load",
    "store_save",
    "train_gk",
    "train_task",
    "triple_weight",
]
