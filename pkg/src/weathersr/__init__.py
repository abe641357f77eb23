"""Diffusion-based super-resolution of gridded temperature fields (SR3 / ResDiff / ResDiff+Physics)."""

from .denoiser import DenoiserConfig, DenoiserModel, build_model, predict_noise
from .engine import ema_update, sample, sample_step, training_step
from .grid import GridField, PairedDataset, PairedSample, StandardizationStats
from .schedule import NoiseSchedule, forward_noise, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "DenoiserConfig",
    "DenoiserModel",
    "GridField",
    "NoiseSchedule",
    "PairedDataset",
    "PairedSample",
    "StandardizationStats",
    "build_model",
    "ema_update",
    "forward_noise",
    "make_linear_schedule",
    "predict_noise",
    "sample",
    "sample_step",
    "training_step",
]
