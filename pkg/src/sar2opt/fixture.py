"""Synthetic paired-tile fixture.

Generates small SAR/optical lookalike pairs so training and evaluation can
be exercised without any real satellite data. Each pair starts from a
smooth random field f in [0, 1]: the optical tile is a fixed palette of f
(R = f, G = 1 - f, B affine in f) and the SAR tile is f with mild
multiplicative speckle. The color mapping is deterministic given f, so a
conditional model can learn it from a few dozen tiles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 8) -> np.ndarray:
    """Low-frequency random field in [0.05, 0.95], shape (size, size)."""
    low = rng.standard_normal((coarse, coarse)).astype(np.float32)
    up = F.interpolate(
        torch.from_numpy(low)[None, None],
        size=(size, size),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    lo, hi = up.min(), up.max()
    span = hi - lo if hi > lo else 1.0
    return 0.05 + 0.9 * (up - lo) / span


def make_fixture(out_dir: str | Path, n_pairs: int = 32, size: int = 64, seed: int = 0) -> Path:
    """Write n_pairs of 8-bit PNGs under out_dir/s1 and out_dir/s2."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    out_dir = Path(out_dir)
    (out_dir / "s1").mkdir(parents=True, exist_ok=True)
    (out_dir / "s2").mkdir(parents=True, exist_ok=True)

    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        f = _smooth_field(rng, size)

        speckle = 1.0 + 0.15 * rng.standard_normal(f.shape).astype(np.float32)
        sar = np.clip(f * speckle, 0.0, 1.0)

        optical = np.stack([f, 1.0 - f, 0.3 + 0.4 * f], axis=-1)

        sar_u8 = np.round(sar * 255.0).astype(np.uint8)
        opt_u8 = np.round(np.clip(optical, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(sar_u8, mode="L").save(out_dir / "s1" / f"tile_{i:04d}_s1.png")
        Image.fromarray(opt_u8, mode="RGB").save(out_dir / "s2" / f"tile_{i:04d}_s2.png")

    return out_dir
