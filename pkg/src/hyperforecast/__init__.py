"""Hypernetwork recurrent forecasters for time series under distribution shift."""
from .data import DatasetManifest, WindowedDataset
from .model import (HyperModel, ModelConfig, VanillaGRU, init_params, init_vanilla,
                    load_checkpoint, predict, save_checkpoint)
from .train import TrainConfig, evaluate, fit

__version__ = "0.1.0"
