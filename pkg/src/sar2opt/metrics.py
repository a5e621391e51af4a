"""Evaluation metrics: PSNR, single-scale SSIM, and Fréchet distance.

All image metrics operate in display space [0, 1] with peak 1. The Fréchet
distance runs over a pluggable feature embedding; the default embedder is
a cheap deterministic statistic (channel moments plus a fixed random
projection of a downsampled copy), not a pretrained network, so its
absolute values are not comparable to published Inception-based numbers.
Reports record the embedder name for that reason.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_chw(img) -> np.ndarray:
    """Coerce a (H, W) or (C, H, W) tensor/array to float64 (C, H, W)."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (H, W) or (C, H, W), got shape {arr.shape}")
    return arr


def psnr(a, b, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE); identical inputs give +inf."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM: 11x11 Gaussian window, sigma 1.5, valid windows only.

    Computed per channel and averaged; the canonical stabilizers are
    C1 = (0.01 peak)^2 and C2 = (0.03 peak)^2.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    win = _ssim_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def windowed_mean(x: np.ndarray) -> np.ndarray:
        patches = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", patches, win)

    vals = []
    for ch in range(a.shape[0]):
        xa, xb = a[ch], b[ch]
        mu_a = windowed_mean(xa)
        mu_b = windowed_mean(xb)
        var_a = windowed_mean(xa * xa) - mu_a * mu_a
        var_b = windowed_mean(xb * xb) - mu_b * mu_b
        cov = windowed_mean(xa * xb) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def _sqrtm_psd(mat: np.ndarray, label: str) -> np.ndarray:
    """Symmetric PSD matrix square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-6:
        warnings.warn(
            f"{label}: clamping negative eigenvalue {vals.min():.3e} to zero", RuntimeWarning
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) with 1/(n-1) covariances."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2:
        raise ShapeError(f"feature sets must be 2-D, got {feats_a.shape} and {feats_b.shape}")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeError(
            f"feature dimension mismatch: {feats_a.shape[1]} vs {feats_b.shape[1]}"
        )
    dim = feats_a.shape[1]
    for name, f in (("first", feats_a), ("second", feats_b)):
        if f.shape[0] < 2:
            raise ValueError(f"{name} feature set needs at least 2 vectors, got {f.shape[0]}")
        if f.shape[0] < dim + 1:
            warnings.warn(
                f"{name} feature set has {f.shape[0]} vectors for dimension {dim}; "
                "covariance is rank-deficient",
                RuntimeWarning,
            )

    mu1, mu2 = feats_a.mean(axis=0), feats_b.mean(axis=0)
    s1 = np.cov(feats_a, rowvar=False, ddof=1).reshape(dim, dim)
    s2 = np.cov(feats_b, rowvar=False, ddof=1).reshape(dim, dim)

    root1 = _sqrtm_psd(s1, "first covariance")
    cross = _sqrtm_psd(root1 @ s2 @ root1, "cross covariance")
    dist = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(dist, 0.0)


@dataclass(frozen=True)
class FeatureEmbedder:
    """Named map from a display-space image to a fixed-length feature vector."""

    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def embed(self, img) -> np.ndarray:
        feats = np.asarray(self.fn(_as_chw(img)), dtype=np.float64).ravel()
        if feats.shape[0] != self.dim:
            raise ShapeError(
                f"embedder {self.name} produced {feats.shape[0]} features, declared {self.dim}"
            )
        return feats

    def embed_all(self, imgs: Iterable) -> np.ndarray:
        rows = [self.embed(img) for img in imgs]
        if not rows:
            raise ValueError("no images to embed")
        return np.stack(rows)


_PROJ_POOL = 16
_PROJ_DIM = 64
_PROJ_SEED = 20240817


def _stats_proj_fn(img: np.ndarray) -> np.ndarray:
    c = img.shape[0]
    means = img.mean(axis=(1, 2))
    variances = img.var(axis=(1, 2))
    if c != 3:
        reps = 3 // c + 1
        means = np.tile(means, reps)[:3]
        variances = np.tile(variances, reps)[:3]
        img = np.tile(img, (reps, 1, 1))[:3]
    pooled = F.adaptive_avg_pool2d(torch.from_numpy(img)[None], (_PROJ_POOL, _PROJ_POOL))
    flat = pooled.numpy().ravel()
    proj = np.random.default_rng(_PROJ_SEED).standard_normal((flat.size, _PROJ_DIM))
    proj /= math.sqrt(flat.size)
    return np.concatenate([means, variances, flat @ proj])


def stats_proj_embedder() -> FeatureEmbedder:
    """Default embedder: 3 channel means, 3 channel variances, and a fixed
    Gaussian random projection of a 16x16 average-pooled copy (64 dims)."""
    return FeatureEmbedder(name="stats-proj-70", dim=6 + _PROJ_DIM, fn=_stats_proj_fn)


EMBEDDERS: dict[str, Callable[[], FeatureEmbedder]] = {
    "stats-proj-70": stats_proj_embedder,
}


def get_embedder(name: str) -> FeatureEmbedder:
    if name not in EMBEDDERS:
        raise KeyError(f"unknown embedder {name!r}; available: {sorted(EMBEDDERS)}")
    return EMBEDDERS[name]()


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[tuple[str, float, float], ...]
    mean_psnr: float
    mean_ssim: float
    count: int
    fid: float | None = None
    embedder_name: str | None = None

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim"]
        for pair_id, p, s in self.rows:
            lines.append(f"{pair_id},{_fmt(p)},{_fmt(s)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        parts = [
            f"pairs={self.count}",
            f"mean_psnr={_fmt(self.mean_psnr)}",
            f"mean_ssim={_fmt(self.mean_ssim)}",
        ]
        if self.fid is not None:
            parts.append(f"fid={_fmt(self.fid)}")
            parts.append(f"embedder={self.embedder_name}")
        return " ".join(parts)


def evaluate(pairs: Iterable[tuple[str, object, object]],
             embedder: FeatureEmbedder | None = None) -> MetricReport:
    """Score (id, generated, truth) pairs in display space.

    Returns per-pair PSNR/SSIM rows plus their means, and the Fréchet
    distance between embedded generated and truth sets when an embedder
    is given.
    """
    rows = []
    gen_feats, truth_feats = [], []
    for pair_id, generated, truth in pairs:
        rows.append((str(pair_id), psnr(generated, truth), ssim(generated, truth)))
        if embedder is not None:
            gen_feats.append(embedder.embed(generated))
            truth_feats.append(embedder.embed(truth))
    if not rows:
        raise ValueError("no pairs to evaluate")

    fid = None
    if embedder is not None:
        fid = frechet_distance(np.stack(gen_feats), np.stack(truth_feats))
    return MetricReport(
        rows=tuple(rows),
        mean_psnr=float(np.mean([r[1] for r in rows])),
        mean_ssim=float(np.mean([r[2] for r in rows])),
        count=len(rows),
        fid=fid,
        embedder_name=embedder.name if embedder is not None else None,
    )
