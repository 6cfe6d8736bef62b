"""Denoising energy-based models on a small numpy autodiff core.

The image energy splits into a latent "semantic" energy, built from a
decoder without skip connections, and a data-space "texture" energy, built
from the reconstruction error of a skip-connected denoising autoencoder.
Samples come from Langevin chains in latent space followed by a short
refinement in data space.
"""

from .data import Dataset, FormatError, load_tensor, save_tensor
from .models import Architecture, ModelParams, load_checkpoint, save_checkpoint
from .noise import NoiseSchedule, build_schedule, make_rng
from .sampler import SamplerConfig, two_stage_sample
from .training import DivergenceError, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Dataset",
    "DivergenceError",
    "FormatError",
    "ModelParams",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "build_schedule",
    "load_checkpoint",
    "load_tensor",
    "make_rng",
    "save_checkpoint",
    "save_tensor",
    "train",
    "two_stage_sample",
]
