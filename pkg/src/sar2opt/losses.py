"""Training objectives.

The composite loss is the usual noise-matching MSE plus a color term: the
clean image and its reconstruction from the predicted noise are both
Gaussian-blurred before comparison, so the term penalizes low-frequency
(color) error while staying blind to edges and texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, ShapeError, predict_x0_from_eps, q_sample


@dataclass(frozen=True)
class BlurSpec:
    """Separable Gaussian blur parameters."""

    kernel_size: int = 21
    sigma: float = 3.0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be an odd positive integer, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def kernel_1d(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Normalized 1-D Gaussian taps; the 2-D kernel is their outer product."""
        half = self.kernel_size // 2
        x = torch.arange(-half, half + 1, dtype=torch.float64)
        k = torch.exp(-(x * x) / (2.0 * self.sigma * self.sigma))
        return (k / k.sum()).to(dtype)


@dataclass(frozen=True)
class LossBreakdown:
    simple: torch.Tensor
    color: torch.Tensor
    total: torch.Tensor
    color_weight: float


def gaussian_blur(img: torch.Tensor, spec: BlurSpec = BlurSpec()) -> torch.Tensor:
    """Per-channel separable Gaussian blur with reflect-padded borders.

    Accepts (C, H, W) or (B, C, H, W); output shape equals input shape.
    Differentiable in img.
    """
    squeeze = img.ndim == 3
    if squeeze:
        img = img.unsqueeze(0)
    if img.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if spec.kernel_size > min(h, w):
        raise ValueError(
            f"kernel_size {spec.kernel_size} exceeds smallest image side {min(h, w)}"
        )
    c = img.shape[1]
    k = spec.kernel_1d(dtype=img.dtype)
    half = spec.kernel_size // 2
    pad = F.pad(img, (half, half, half, half), mode="reflect")
    row = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    col = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    out = F.conv2d(F.conv2d(pad, row, groups=c), col, groups=c)
    return out.squeeze(0) if squeeze else out


def simple_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise (0-dim tensor)."""
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps, reduction="mean")


def color_loss(x0: torch.Tensor, x0_pred: torch.Tensor, spec: BlurSpec = BlurSpec()) -> torch.Tensor:
    """Mean squared error between the blurred clean image and blurred reconstruction."""
    if x0.shape != x0_pred.shape:
        raise ShapeError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_pred.shape)}")
    return F.mse_loss(gaussian_blur(x0_pred, spec), gaussian_blur(x0, spec), reduction="mean")


def training_loss(
    predictor,
    x0: torch.Tensor,
    sar: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    spec: BlurSpec = BlurSpec(),
    color_weight: float = 1.0,
) -> LossBreakdown:
    """Compose the full training objective for one batch.

    Noises x0 to x_t, runs the predictor on (x_t, t) conditioned on sar,
    reconstructs x0 from the predicted noise, and returns both loss terms.
    The returned total carries the autograd graph.
    """
    xt = q_sample(x0, t, eps, sched)
    embed = getattr(predictor, "embed_condition", None)
    if callable(embed):
        eps_hat = predictor(xt, t, embed(sar))
    else:
        eps_hat = predictor(xt, t, sar)
    x0_pred = predict_x0_from_eps(xt, t, eps_hat, sched)
    simple = simple_loss(eps, eps_hat)
    color = color_loss(x0, x0_pred, spec)
    total = simple + color_weight * color
    return LossBreakdown(simple=simple, color=color, total=total, color_weight=float(color_weight))
