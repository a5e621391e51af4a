"""Closed-form Gaussian diffusion mathematics.

Implements the standard DDPM quantities over a precomputed variance
schedule:

- forward noising     x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
- x_0 reconstruction  x0' = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
- reverse step        x_{t-1} = mu + sigma_t z,
                      mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
- full ancestral sampling conditioned on an auxiliary image.

Step indices are 1-based: t runs from 1 (least noisy) to T (pure noise).
Schedule tables are computed and stored in float64 and cast to the working
precision of the tensors they are applied to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


VARIANCE_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step noise tables for a T-step diffusion process.

    All arrays are float64 tensors of length T. ``sigmas[0]`` is forced to
    zero: the final denoising step (t=1) adds no noise.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor
    beta_start: float
    beta_end: float
    variance_mode: str

    def fingerprint(self) -> dict:
        """Identifying parameters, stored in checkpoints to refuse mismatched schedules."""
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "variance_mode": self.variance_mode,
        }


def make_linear_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    variance_mode: str = "beta",
) -> NoiseSchedule:
    """Build the linear-beta schedule with betas spaced from beta_start to beta_end inclusive.

    variance_mode selects the sampling noise scale: "beta" uses
    sigma_t^2 = beta_t, "beta_tilde" uses the posterior variance
    sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t (with abar_0 = 1).
    """
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ValueError(f"beta_start must lie in (0, 1), got {beta_start!r}")
    if not 0.0 < beta_end < 1.0:
        raise ValueError(f"beta_end must lie in (0, 1), got {beta_end!r}")
    if beta_start > beta_end:
        raise ValueError(
            f"beta_start must not exceed beta_end, got {beta_start!r} > {beta_end!r}"
        )
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(
            f"variance_mode must be one of {VARIANCE_MODES}, got {variance_mode!r}"
        )

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    if variance_mode == "beta":
        variances = betas.copy()
    else:
        alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
        variances = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
    sigmas = np.sqrt(variances)
    sigmas[0] = 0.0

    return NoiseSchedule(
        T=T,
        betas=torch.from_numpy(betas),
        alphas=torch.from_numpy(alphas),
        alpha_bars=torch.from_numpy(alpha_bars),
        sigmas=torch.from_numpy(sigmas),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        variance_mode=variance_mode,
    )


def _check_same_shape(ref: torch.Tensor, other: torch.Tensor, name: str) -> None:
    if tuple(other.shape) != tuple(ref.shape):
        raise ShapeError(
            f"{name} shape {tuple(other.shape)} does not match {tuple(ref.shape)}"
        )


def _lookup(table: torch.Tensor, t, T: int, ref: torch.Tensor) -> torch.Tensor:
    """Fetch per-step coefficients at 1-based t, cast to ref's dtype, shaped to broadcast."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape != (ref.shape[0],):
            raise ShapeError(
                f"per-sample t shape {tuple(t.shape)} does not match batch size {ref.shape[0]}"
            )
        t = t.long()
        if int(t.min()) < 1 or int(t.max()) > T:
            raise IndexError(f"step indices must lie in [1, {T}], got {t.tolist()}")
        vals = table[t - 1].to(ref.dtype)
        return vals.view((len(t),) + (1,) * (ref.ndim - 1))
    ti = int(t)
    if not 1 <= ti <= T:
        raise IndexError(f"step index t={ti} out of range [1, {T}]")
    return table[ti - 1].to(ref.dtype)


def q_sample(
    x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward-noise x0 to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_same_shape(x0, eps, "eps")
    ab = _lookup(sched.alpha_bars, t, sched.T, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def predict_x0_from_eps(
    xt: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward closed form: (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    _check_same_shape(xt, eps, "eps")
    ab = _lookup(sched.alpha_bars, t, sched.T, xt)
    return (xt - torch.sqrt(1.0 - ab) * eps) / torch.sqrt(ab)


def posterior_step(
    xt: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    z: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One reverse step from x_t to x_{t-1} given predicted noise.

    Returns mu + sigma_t z with
    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
    At t = 1 the noise term is dropped and mu is returned unchanged.
    """
    _check_same_shape(xt, eps_hat, "eps_hat")
    _check_same_shape(xt, z, "z")
    a = _lookup(sched.alphas, t, sched.T, xt)
    b = _lookup(sched.betas, t, sched.T, xt)
    ab = _lookup(sched.alpha_bars, t, sched.T, xt)
    mu = (xt - (b / torch.sqrt(1.0 - ab)) * eps_hat) / torch.sqrt(a)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        sigma = _lookup(sched.sigmas, t, sched.T, xt)
        keep = (t.long() != 1).to(xt.dtype).view((len(t),) + (1,) * (xt.ndim - 1))
        return mu + keep * sigma * z
    if int(t) == 1:
        return mu
    sigma = _lookup(sched.sigmas, t, sched.T, xt)
    return mu + sigma * z


def sample(
    predictor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    seed: int,
    out_channels: int = 3,
) -> torch.Tensor:
    """Run the full ancestral chain conditioned on a raw SAR tile.

    predictor is called as predictor(x_t, t, c) -> eps_hat; when it exposes
    an ``embed_condition`` method the conditioning tile is lifted once and
    the lifted feature map is passed at every step. Starts from
    x_T ~ N(0, I), steps t = T..1, and clamps the result to [-1, 1].
    Deterministic for a fixed seed.
    """
    gen = torch.Generator().manual_seed(int(seed))
    embed = getattr(predictor, "embed_condition", None)
    with torch.no_grad():
        c = embed(cond) if callable(embed) else cond
        shape = (out_channels,) + tuple(cond.shape[-2:])
        x = torch.randn(shape, generator=gen, dtype=cond.dtype)
        for t in range(sched.T, 0, -1):
            eps_hat = predictor(x, t, c)
            if tuple(eps_hat.shape) != tuple(x.shape):
                raise ShapeError(
                    f"predictor returned shape {tuple(eps_hat.shape)}, expected {tuple(x.shape)}"
                )
            if t > 1:
                z = torch.randn(shape, generator=gen, dtype=cond.dtype)
            else:
                z = torch.zeros(shape, dtype=cond.dtype)
            x = posterior_step(x, t, eps_hat, z, sched)
    return x.clamp(-1.0, 1.0)
