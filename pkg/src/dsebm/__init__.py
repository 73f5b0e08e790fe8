"""Deep structured energy based models for anomaly detection."""

from .conv import ConvEnergyParams, init_conv
from .datasets import LabeledDataset, Normalizer, load_dataset, make_contaminated
from .dense import DenseEnergyParams, init_dense
from .detection import ScoreReport, choose_threshold, evaluate, score_samples
from .persistence import ModelArtifact, load_model, save_model
from .recurrent import RecurrentEnergyParams, init_recurrent
from .training import TrainConfig, fit, train

__all__ = [
    "ConvEnergyParams", "DenseEnergyParams", "LabeledDataset", "ModelArtifact", "Normalizer",
    "RecurrentEnergyParams", "ScoreReport", "TrainConfig", "choose_threshold", "evaluate", "fit",
    "init_conv", "init_dense", "init_recurrent", "load_dataset", "load_model", "make_contaminated",
    "save_model", "score_samples", "train",
]
