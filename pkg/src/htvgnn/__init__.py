"""Time-varying graph neural network for multi-step traffic forecasting."""
from .data import SeriesDataset, load_series, split_and_window, synth_network
from .errors import HTVGNNError
from .graphs import GraphSet
from .model import HTVGNN, ModelConfig, load_checkpoint, preset, save_checkpoint
from .trainer import evaluate, metrics, train

__all__ = ["HTVGNN", "GraphSet", "HTVGNNError", "ModelConfig", "SeriesDataset", "evaluate",
           "load_checkpoint", "load_series", "metrics", "preset", "save_checkpoint",
           "split_and_window", "synth_network", "train"]
__version__ = "0.1.0"
