from .checkpoint import load_checkpoint, load_into_module, module_tensors, save_checkpoint
from .core import (
    FnoSurrogate,
    PiJepaModel,
    SurrogateModel,
    build_fno_surrogate,
    build_jepa,
    build_surrogate,
)
from .ema import EmaSchedule, ema_lag_probe, ema_update, ema_update_tensors
from .encoder import EncoderConfig, FourierAttentionEncoder
from .fno import Fno2d, FnoConfig
from .heads import ChannelAdapter, FinetuneHead, StageFieldDecoder
from .layers import patchify, sinusoidal_positions, unpatchify
from .predictor import PredictorConfig, StagePredictorBank

__all__ = [
    "ChannelAdapter",
    "EmaSchedule",
    "EncoderConfig",
    "FinetuneHead",
    "Fno2d",
    "FnoConfig",
    "FnoSurrogate",
    "FourierAttentionEncoder",
    "PiJepaModel",
    "PredictorConfig",
    "StageFieldDecoder",
    "StagePredictorBank",
    "SurrogateModel",
    "build_fno_surrogate",
    "build_jepa",
    "build_surrogate",
    "ema_lag_probe",
    "ema_update",
    "ema_update_tensors",
    "load_checkpoint",
    "load_into_module",
    "module_tensors",
    "patchify",
    "save_checkpoint",
    "sinusoidal_positions",
    "unpatchify",
]
