"""Desk-scale RGB-thermal tracker with modality prompts, template interaction and online template selection."""
from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigError, DimensionError, InputError, LoadError, NumericError,
                     TATrackError, UsageError)
from .model import BBox, ModelConfig, TATrack, decode_box, default_sti_layers
from .tracker import CropSpec, Tracker, track_sequences
from .train import TrainConfig, finetune_tatrack, pretrain_base

__version__ = "0.1.0"

__all__ = [
    "BBox", "BackboneConfig", "ConfigError", "CropSpec", "DimensionError", "InputError", "LoadError",
    "ModelConfig", "NumericError", "TATrack", "TATrackError", "Tracker", "TrainConfig", "UsageError",
    "decode_box", "default_sti_layers", "finetune_tatrack", "load_checkpoint", "pretrain_base",
    "save_checkpoint", "track_sequences",
]
