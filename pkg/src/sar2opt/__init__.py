"""SAR-to-optical tile translation with a conditional denoising diffusion model."""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule,
    ShapeError,
    make_linear_schedule,
    posterior_step,
    predict_x0_from_eps,
    q_sample,
    sample,
)
from .losses import BlurSpec, LossBreakdown, color_loss, gaussian_blur, simple_loss, training_loss
from .metrics import evaluate, frechet_distance, psnr, ssim
from .unet import ConditionalUNet, ConditionEmbedder, ModelConfig, time_embedding

__all__ = [
    "BlurSpec",
    "ConditionEmbedder",
    "ConditionalUNet",
    "LossBreakdown",
    "ModelConfig",
    "NoiseSchedule",
    "ShapeError",
    "color_loss",
    "evaluate",
    "frechet_distance",
    "gaussian_blur",
    "make_linear_schedule",
    "posterior_step",
    "predict_x0_from_eps",
    "psnr",
    "q_sample",
    "sample",
    "simple_loss",
    "ssim",
    "time_embedding",
    "training_loss",
]
