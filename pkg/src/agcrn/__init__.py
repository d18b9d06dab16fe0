"""Adaptive graph convolutional recurrent network for traffic forecasting."""
from .data import Dataset, Normalizer, RawSeries, load_csv, metrics, split_and_window, synth_generate
from .estimators import AGCRNForecaster
from .graph import PredefinedGraph, build_supports, dagg_matrix
from .model import ModelConfig, build, count_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "AGCRNForecaster",
    "Dataset",
    "ModelConfig",
    "Normalizer",
    "PredefinedGraph",
    "RawSeries",
    "TrainConfig",
    "build",
    "build_supports",
    "count_params",
    "dagg_matrix",
    "load_checkpoint",
    "load_csv",
    "metrics",
    "save_checkpoint",
    "split_and_window",
    "synth_generate",
    "train",
]
