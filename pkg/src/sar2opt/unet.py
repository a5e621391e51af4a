"""Conditional noise predictor.

A compact U-Net that consumes the noisy 3-channel optical tensor
concatenated with a 3-channel lift of the SAR tile (a single 1x1
convolution, no nonlinearity) plus a sinusoidal time embedding. Residual
blocks use group normalization and SiLU; downsampling is a stride-2 conv,
upsampling nearest-neighbor + conv, skip connections concatenate. Optional
single-head self-attention at the lowest resolution, off by default.

Initialization: conv kernels keep torch's variance-scaled default; each
residual block's final conv starts at zero so every block begins as an
identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ShapeError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the parameter count is a pure function of these."""

    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 1
    time_dim: int = 128
    sar_channels: int = 1
    attention: bool = False

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive, got {self.base_channels}")
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise ValueError(f"channel_mults must be positive, got {self.channel_mults}")
        if self.blocks_per_level < 1:
            raise ValueError(f"blocks_per_level must be positive, got {self.blocks_per_level}")
        if self.time_dim < 2 or self.time_dim % 2 != 0:
            raise ValueError(f"time_dim must be a positive even integer, got {self.time_dim}")
        if self.sar_channels < 1:
            raise ValueError(f"sar_channels must be positive, got {self.sar_channels}")
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "blocks_per_level": self.blocks_per_level,
            "time_dim": self.time_dim,
            "sar_channels": self.sar_channels,
            "attention": self.attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            base_channels=int(d["base_channels"]),
            channel_mults=tuple(int(m) for m in d["channel_mults"]),
            blocks_per_level=int(d["blocks_per_level"]),
            time_dim=int(d["time_dim"]),
            sar_channels=int(d["sar_channels"]),
            attention=bool(d.get("attention", False)),
        )


def time_embedding(t, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal step embedding: [sin(t w_k)..., cos(t w_k)...] with w_k = 10000^(-2k/dim).

    t may be an int (returns shape (dim,)) or a 1-D tensor (returns (len(t), dim)).
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * 2.0 * torch.arange(half, dtype=torch.float64) / dim
    )
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        args = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    else:
        args = float(t) * freqs
        emb = torch.cat([torch.sin(args), torch.cos(args)])
    return emb.to(dtype)


def _num_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else math.gcd(channels, 8)


class ConditionEmbedder(nn.Module):
    """1x1 convolution lifting the SAR tile to a 3-channel feature map."""

    def __init__(self, sar_channels: int = 1, out_channels: int = 3):
        super().__init__()
        self.sar_channels = sar_channels
        self.conv = nn.Conv2d(sar_channels, out_channels, kernel_size=1)

    def forward(self, sar: torch.Tensor) -> torch.Tensor:
        squeeze = sar.ndim == 3
        if squeeze:
            sar = sar.unsqueeze(0)
        if sar.ndim != 4 or sar.shape[1] != self.sar_channels:
            raise ShapeError(
                f"expected SAR input with {self.sar_channels} channels, got shape {tuple(sar.shape)}"
            )
        out = self.conv(sar)
        return out.squeeze(0) if squeeze else out


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_num_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        # Zero-init the last conv so each block starts as an identity map.
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions via 1x1 convs."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionalUNet(nn.Module):
    """eps_hat = f(x_t, t, fm) where fm is the lifted SAR conditioning map."""

    IMAGE_CHANNELS = 3

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config

        self.cond_embed = ConditionEmbedder(cfg.sar_channels, self.IMAGE_CHANNELS)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )

        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(2 * self.IMAGE_CHANNELS, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chans = [chans[0]]
        ch = chans[0]
        for i, out_ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResidualBlock(ch, out_ch, cfg.time_dim))
                ch = out_ch
                skip_chans.append(ch)
            self.down_blocks.append(blocks)
            if i < len(chans) - 1:
                self.downsamples.append(Downsample(ch))
                skip_chans.append(ch)

        self.mid_block1 = ResidualBlock(ch, ch, cfg.time_dim)
        self.mid_attn = SelfAttention2d(ch) if cfg.attention else None
        self.mid_block2 = ResidualBlock(ch, ch, cfg.time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, out_ch in reversed(list(enumerate(chans))):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level + 1):
                blocks.append(ResidualBlock(ch + skip_chans.pop(), out_ch, cfg.time_dim))
                ch = out_ch
            self.up_blocks.append(blocks)
            if i > 0:
                self.upsamples.append(Upsample(ch))

        self.out_norm = nn.GroupNorm(_num_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, self.IMAGE_CHANNELS, 3, padding=1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_condition(self, sar: torch.Tensor) -> torch.Tensor:
        return self.cond_embed(sar)

    def predict_noise(self, xt: torch.Tensor, t, sar: torch.Tensor) -> torch.Tensor:
        return self.forward(xt, t, self.embed_condition(sar))

    def forward(self, xt: torch.Tensor, t, fm: torch.Tensor) -> torch.Tensor:
        squeeze = xt.ndim == 3
        if squeeze:
            xt = xt.unsqueeze(0)
            fm = fm.unsqueeze(0) if fm.ndim == 3 else fm
        if xt.ndim != 4 or xt.shape[1] != self.IMAGE_CHANNELS:
            raise ShapeError(f"noisy input must be (B, 3, H, W), got {tuple(xt.shape)}")
        if tuple(fm.shape) != tuple(xt.shape):
            raise ShapeError(
                f"conditioning map shape {tuple(fm.shape)} does not match noisy input {tuple(xt.shape)}"
            )
        div = self.config.spatial_divisor
        h_px, w_px = xt.shape[-2:]
        if h_px % div or w_px % div:
            raise ShapeError(
                f"spatial size {h_px}x{w_px} must be divisible by {div} "
                f"for a {self.config.levels}-level model"
            )

        dtype = self.out_conv.weight.dtype
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            tvec = t
        else:
            tvec = torch.full((xt.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(time_embedding(tvec, self.config.time_dim, dtype=dtype))

        h = self.stem(torch.cat([xt, fm], dim=1))
        skips = [h]
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
                skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = self.downsamples[i](h)
                skips.append(h)

        h = self.mid_block1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for i, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.up_blocks) - 1:
                h = self.upsamples[i](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.squeeze(0) if squeeze else out
