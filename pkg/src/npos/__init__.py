"""Outlier synthesis in embedding space for out-of-distribution detection."""

__version__ = "0.1.0"

from .data import EmbeddingSet, SyntheticSpec, gen_synthetic, load_embeddings, save_embeddings
from .estimator import KNNScorer, NPOSClassifier
from .knn import KnnParams, knn_distance, knn_distances_batch
from .losses import r_closed, r_open
from .metrics import aupr, auroc, choose_threshold, detect, evaluate, fpr_at_tpr, knn_score, npos_score
from .model import Model, load_model, save_model
from .synth import SynthesisConfig, synthesize
from .trainer import TrainConfig, parse_config, train

__all__ = [
    "EmbeddingSet", "SyntheticSpec", "gen_synthetic", "load_embeddings", "save_embeddings",
    "KNNScorer", "NPOSClassifier", "KnnParams", "knn_distance", "knn_distances_batch",
    "r_closed", "r_open", "aupr", "auroc", "choose_threshold", "detect", "evaluate", "fpr_at_tpr",
    "knn_score", "npos_score", "Model", "load_model", "save_model", "SynthesisConfig", "synthesize",
    "TrainConfig", "parse_config", "train",
]
