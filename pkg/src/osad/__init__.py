"""One-shot affordance detection from a single human-object interaction image."""

from osad.config import RunConfig, load_config
from osad.data import SynthConfig, generate_synthetic_dataset, load_dataset
from osad.engine import evaluate, predict, sweep, train
from osad.model import ModelConfig, OSADNet

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "OSADNet",
    "RunConfig",
    "SynthConfig",
    "evaluate",
    "generate_synthetic_dataset",
    "load_config",
    "load_dataset",
    "predict",
    "sweep",
    "train",
]
