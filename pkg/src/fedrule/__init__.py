"""Graph-based trigger-action rule recommendation with centralized and federated training."""

from .graph import Dataset, EdgeSplit, EntityGraph, User, Vocab, build_graph, load_dataset, save_dataset
from .model import ModelParams, encode, gradients, load_model, loss, predict_edge, save_model, score_all

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EdgeSplit", "EntityGraph", "User", "Vocab", "build_graph", "load_dataset", "save_dataset",
    "ModelParams", "encode", "gradients", "load_model", "loss", "predict_edge", "save_model", "score_all",
]
