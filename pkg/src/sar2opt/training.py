"""Training loop: AdamW with linear warmup, CSV logging, exact resume.

Determinism contract: given one config and one worker, the entire run is a
pure function of the seed. Model init, per-step (t, eps) draws, and data
order all come from explicitly seeded generators; the optimizer moments,
parameters, and torch generator state are checkpointed, so resuming from a
checkpoint reproduces the remaining loss log bitwise.

The optimizer is implemented directly over named parameter tensors rather
than through torch.optim so its full state lives in plain dicts that the
checkpoint container can round-trip bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    CheckpointError,
    ensure_schedule_matches,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, TrainConfig
from .data import DatasetManifest, load_pair, scan_pairs
from .diffusion import NoiseSchedule
from .losses import training_loss
from .unet import ConditionalUNet

LOG_HEADER = "step,lr,simple,color,total"


@dataclass
class TrainState:
    """Mutable optimizer state; tensors are shared with the live model."""

    step: int
    params: dict[str, torch.Tensor]
    m1: dict[str, torch.Tensor]
    m2: dict[str, torch.Tensor]
    lr: float = 0.0


def lr_at(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup from 0 to peak_lr over warmup_steps, constant after."""
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be at least 1, got {warmup_steps}")
    return min(step / warmup_steps, 1.0) * peak_lr


def adamw_step(
    state: TrainState,
    grads: dict[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> TrainState:
    """One decoupled-weight-decay Adam update, in place on state.params.

    Decay is applied first (p <- p - lr*wd*p), then the bias-corrected
    Adam step. Raises on non-finite gradients, naming the parameter.
    """
    step = state.step + 1
    with torch.no_grad():
        for name, p in state.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for parameter {name!r} at step {step}")
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m = state.m1[name]
            v = state.m2[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**step)
            v_hat = v / (1.0 - beta2**step)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    state.step = step
    state.lr = lr
    return state


def _batch_ids_for_step(ids: list[str], batch_size: int, seed: int, step: int) -> list[str]:
    """Deterministic batch membership for a 1-based global step.

    Steps walk epochs of ceil(n / batch_size) batches; each epoch is a
    fresh permutation seeded by (seed, epoch), so any step's batch can be
    recomputed independently - resume needs no stream state.
    """
    n = len(ids)
    per_epoch = math.ceil(n / batch_size)
    epoch, index = divmod(step - 1, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [ids[i] for i in order[index * batch_size : (index + 1) * batch_size]]


class _PairCache:
    """Bounded decode cache; the fixture fits entirely, big sets recycle."""

    def __init__(self, manifest: DatasetManifest, cfg: TrainConfig, cap: int = 2048):
        self.manifest = manifest
        self.cfg = cfg
        self.cap = cap
        self.store: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.by_id = {r.id: r for r in manifest.records}

    def get(self, pair_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        hit = self.store.get(pair_id)
        if hit is None:
            d = self.cfg.data
            sample = load_pair(
                self.manifest,
                self.by_id[pair_id],
                sar_channels=d.sar_channels,
                target_size=d.tile_size,
                sar_stretch=d.sar_stretch,
            )
            hit = (sample.sar, sample.optical)
            if len(self.store) >= self.cap:
                self.store.clear()
            self.store[pair_id] = hit
        return hit


def _rewrite_log_upto(log_path: Path, step: int) -> list[str]:
    """Drop log rows past a resume point so the appended log stays consistent."""
    if not log_path.exists():
        return [LOG_HEADER]
    kept = [LOG_HEADER]
    for line in log_path.read_text().splitlines():
        if not line or line == LOG_HEADER:
            continue
        try:
            row_step = int(line.split(",", 1)[0])
        except ValueError:
            continue
        if row_step <= step:
            kept.append(line)
    return kept


def _save(run_dir: Path, name: str, sched: NoiseSchedule,
          model: ConditionalUNet, state: TrainState, gen: torch.Generator,
          ema: dict[str, torch.Tensor] | None) -> Path:
    return save_checkpoint(
        run_dir / name,
        model_config=model.config,
        params=model.state_dict(),
        schedule=sched,
        step=state.step,
        moments1=state.m1,
        moments2=state.m2,
        rng_torch=gen.get_state(),
        ema=ema,
    )


def train(config: TrainConfig, resume: str | Path | None = None) -> Path:
    """Run the configured number of steps and return the final checkpoint path."""
    if config.data.root is None:
        raise ConfigError("data.root is required for training")
    run_dir = Path(config.run.dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config-resolved.yaml").write_text(config.to_yaml())

    manifest = scan_pairs(
        config.data.root, seed=config.data.split_seed, fractions=config.data.fractions()
    )
    train_ids = manifest.ids("train")
    if not train_ids:
        raise ConfigError("training split is empty; adjust data.train_fraction or the dataset")
    (run_dir / "manifest.txt").write_text(manifest.to_text())

    sched = config.schedule.build()
    tcfg = config.training
    ocfg = config.optimizer
    warmup = config.warmup_steps()

    torch.manual_seed(tcfg.seed)
    model = ConditionalUNet(config.model_config())
    gen = torch.Generator().manual_seed(tcfg.seed)

    params = dict(model.named_parameters())
    state = TrainState(
        step=0,
        params={k: p.data for k, p in params.items()},
        m1={k: torch.zeros_like(p.data) for k, p in params.items()},
        m2={k: torch.zeros_like(p.data) for k, p in params.items()},
    )
    ema: dict[str, torch.Tensor] | None = None
    if tcfg.ema:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if resume is not None:
        ckpt = load_checkpoint(resume)
        ensure_schedule_matches(ckpt, sched)
        if ckpt.model_config != model.config:
            raise CheckpointError(
                f"model config mismatch: checkpoint {ckpt.model_config}, config {model.config}"
            )
        model.load_state_dict(ckpt.params, strict=True)
        if ckpt.moments1 is None or ckpt.moments2 is None or ckpt.rng_torch is None:
            raise CheckpointError("checkpoint lacks optimizer state; cannot resume training")
        for k in state.m1:
            state.m1[k].copy_(ckpt.moments1[k])
            state.m2[k].copy_(ckpt.moments2[k])
        gen.set_state(ckpt.rng_torch)
        state.step = ckpt.step
        if tcfg.ema:
            if ckpt.ema is None:
                raise CheckpointError("checkpoint lacks EMA state; cannot resume with ema enabled")
            ema = {k: v.clone() for k, v in ckpt.ema.items()}

    log_path = run_dir / "loss.csv"
    log_lines = _rewrite_log_upto(log_path, state.step)
    log_path.write_text("\n".join(log_lines) + "\n")

    cache = _PairCache(manifest, config)
    blur = config.loss.blur_spec()

    with open(log_path, "a") as log:
        for step in range(state.step + 1, tcfg.iterations + 1):
            ids = _batch_ids_for_step(train_ids, tcfg.batch_size, tcfg.seed, step)
            pairs = [cache.get(pid) for pid in ids]
            sar = torch.stack([p[0] for p in pairs])
            x0 = torch.stack([p[1] for p in pairs])

            b = x0.shape[0]
            t = torch.randint(1, sched.T + 1, (b,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)

            breakdown = training_loss(
                model, x0, sar, t, eps, sched, blur, config.loss.color_weight
            )
            if not torch.isfinite(breakdown.total):
                raise RuntimeError(
                    f"non-finite loss at step {step}: simple={breakdown.simple.item()!r} "
                    f"color={breakdown.color.item()!r}; batch ids: {ids}"
                )
            model.zero_grad(set_to_none=True)
            breakdown.total.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}

            lr = lr_at(step, ocfg.peak_lr, warmup)
            adamw_step(state, grads, lr, ocfg.beta1, ocfg.beta2, ocfg.eps, ocfg.weight_decay)

            if ema is not None:
                with torch.no_grad():
                    for k, v in model.state_dict().items():
                        ema[k].mul_(tcfg.ema_decay).add_(v, alpha=1.0 - tcfg.ema_decay)

            if step % tcfg.log_interval == 0 or step == tcfg.iterations:
                simple = float(breakdown.simple.item())
                color = float(breakdown.color.item())
                total = float(breakdown.total.item())
                log.write(f"{step},{lr!r},{simple!r},{color!r},{total!r}\n")
                log.flush()

            if step % tcfg.checkpoint_interval == 0 and step != tcfg.iterations:
                _save(run_dir, f"checkpoint-{step:06d}.npz", sched, model, state, gen, ema)

    return _save(run_dir, "checkpoint-final.npz", sched, model, state, gen, ema)
