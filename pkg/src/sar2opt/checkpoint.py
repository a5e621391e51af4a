"""Versioned checkpoint container.

A single uncompressed .npz file holding little-endian named arrays plus a
JSON metadata block: format name and version, model config, noise-schedule
fingerprint, and step counter. Optimizer moments, torch RNG state, and an
optional EMA copy of the parameters ride along so training can resume
bit-identically. Loading verifies the format and version; samplers call
ensure_schedule_matches so a checkpoint is never run under a different
schedule than it was trained with.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .unet import ConditionalUNet, ModelConfig

FORMAT_NAME = "sar2opt-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, malformed, or incompatible checkpoint file."""


def _to_le_array(t: torch.Tensor) -> np.ndarray:
    arr = np.ascontiguousarray(t.detach().cpu().numpy())
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def _from_array(arr: np.ndarray) -> torch.Tensor:
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return torch.from_numpy(np.array(arr))


@dataclass
class Checkpoint:
    model_config: ModelConfig
    schedule_fingerprint: dict
    step: int
    params: dict[str, torch.Tensor]
    moments1: dict[str, torch.Tensor] | None = None
    moments2: dict[str, torch.Tensor] | None = None
    rng_torch: torch.Tensor | None = None
    ema: dict[str, torch.Tensor] | None = None

    def build_model(self, use_ema: bool = False) -> ConditionalUNet:
        model = ConditionalUNet(self.model_config)
        source = self.ema if use_ema else self.params
        if use_ema and self.ema is None:
            raise CheckpointError("checkpoint holds no EMA parameters")
        model.load_state_dict(source, strict=True)
        return model


def save_checkpoint(
    path: str | Path,
    model_config: ModelConfig,
    params: dict[str, torch.Tensor],
    schedule: NoiseSchedule,
    step: int = 0,
    moments1: dict[str, torch.Tensor] | None = None,
    moments2: dict[str, torch.Tensor] | None = None,
    rng_torch: torch.Tensor | None = None,
    ema: dict[str, torch.Tensor] | None = None,
) -> Path:
    path = Path(path)
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "step": int(step),
        "model": model_config.to_dict(),
        "schedule": schedule.fingerprint(),
    }
    arrays: dict[str, np.ndarray] = {
        "meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    }
    for name, t in params.items():
        arrays[f"param/{name}"] = _to_le_array(t)
    for prefix, group in (("m1", moments1), ("m2", moments2), ("ema", ema)):
        if group is not None:
            for name, t in group.items():
                arrays[f"{prefix}/{name}"] = _to_le_array(t)
    if rng_torch is not None:
        arrays["rng_torch"] = _to_le_array(rng_torch)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        archive = np.load(path)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with archive:
        if "meta" not in archive:
            raise CheckpointError(f"{path} has no metadata block")
        meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
        if meta.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path} is version {meta.get('version')}, expected {FORMAT_VERSION}"
            )

        groups: dict[str, dict[str, torch.Tensor]] = {"param": {}, "m1": {}, "m2": {}, "ema": {}}
        rng = None
        for key in archive.files:
            if key == "meta":
                continue
            if key == "rng_torch":
                rng = _from_array(archive[key])
                continue
            prefix, _, name = key.partition("/")
            if prefix in groups and name:
                groups[prefix][name] = _from_array(archive[key])

    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model"]),
        schedule_fingerprint=meta["schedule"],
        step=int(meta["step"]),
        params=groups["param"],
        moments1=groups["m1"] or None,
        moments2=groups["m2"] or None,
        rng_torch=rng,
        ema=groups["ema"] or None,
    )


def ensure_schedule_matches(ckpt: Checkpoint, sched: NoiseSchedule) -> None:
    """Refuse to pair a checkpoint with a schedule it was not trained under."""
    want = ckpt.schedule_fingerprint
    have = sched.fingerprint()
    if want != have:
        diffs = [
            f"{k}: checkpoint={want.get(k)!r} schedule={have.get(k)!r}"
            for k in sorted(set(want) | set(have))
            if want.get(k) != have.get(k)
        ]
        raise CheckpointError("schedule mismatch - " + "; ".join(diffs))


def schedule_from_fingerprint(fp: dict) -> NoiseSchedule:
    from .diffusion import make_linear_schedule

    return make_linear_schedule(
        T=int(fp["T"]),
        beta_start=float(fp["beta_start"]),
        beta_end=float(fp["beta_end"]),
        variance_mode=str(fp["variance_mode"]),
    )
