"""Paired SAR/optical tile ingestion.

Expects SEN12-style trees: SAR tiles live under path components or filename
tokens containing ``s1``, optical tiles under ``s2``, with otherwise
matching names. Examples that pair up:

    root/s1/tile_0007.png          <-> root/s2/tile_0007.png
    root/ROIs1158_spring/s1_1/ROIs1158_spring_s1_1_p30.png
        <-> root/ROIs1158_spring/s2_1/ROIs1158_spring_s2_1_p30.png

Matching is token-aware (components are split on underscores) so strings
like ``ROIs1158`` are never mistaken for the ``s1`` marker. Images are
8-bit or 16-bit PNGs; pixel range [0, max] maps to model space [-1, 1].
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = {"train": 0.875, "val": 0.125}


class EmptyDatasetError(RuntimeError):
    """No usable pairs were found, or a requested split is empty."""


class DecodeError(RuntimeError):
    """An image file exists but could not be decoded."""


@dataclass(frozen=True)
class PairRecord:
    """One SAR/optical pair; paths are POSIX-relative to the dataset root."""

    id: str
    sar_path: str
    optical_path: str


@dataclass(frozen=True)
class PairedSample:
    sar: torch.Tensor
    optical: torch.Tensor
    id: str


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    records: tuple[PairRecord, ...]
    splits: dict[str, str]
    seed: int
    orphans: tuple[str, ...] = ()

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [r.id for r in self.records]
        return [r.id for r in self.records if self.splits[r.id] == split]

    def record(self, pair_id: str) -> PairRecord:
        for r in self.records:
            if r.id == pair_id:
                return r
        raise KeyError(pair_id)

    def to_text(self) -> str:
        lines = [f"# root={self.root} seed={self.seed}"]
        for r in self.records:
            lines.append(f"{r.id}\t{r.sar_path}\t{r.optical_path}\t{self.splits[r.id]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root: str, seed: int = 0) -> "DatasetManifest":
        records, splits = [], {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            pid, sar, opt, split = line.split("\t")
            records.append(PairRecord(id=pid, sar_path=sar, optical_path=opt))
            splits[pid] = split
        return cls(root=root, records=tuple(records), splits=splits, seed=seed)


def classify_path(rel: str) -> tuple[str | None, str]:
    """Map a relative path to (kind, pair id); kind is 's1', 's2', or None.

    The pair id is the path with every s1/s2 underscore token dropped, so
    the SAR and optical members of a pair share one id. The file extension
    is held out of tokenization so names like tile_0000_s1.png work. Files
    with no marker keep their full path as id; conflicting markers give
    kind None.
    """
    kind = None
    conflict = False
    out_parts = []
    parts = PurePosixPath(rel).parts
    for i, comp in enumerate(parts):
        suffix = ""
        if i == len(parts) - 1:
            dot = comp.rfind(".")
            if dot > 0:
                comp, suffix = comp[:dot], comp[dot:]
        kept = []
        for tok in comp.split("_"):
            if tok in ("s1", "s2"):
                if kind is not None and kind != tok:
                    conflict = True
                kind = tok
            else:
                kept.append(tok)
        if kept or suffix:
            out_parts.append("_".join(kept) + suffix)
    if conflict:
        return None, rel
    if kind is None:
        return None, rel
    return kind, "/".join(out_parts)


def assign_split(pair_id: str, seed: int, fractions: dict[str, float]) -> str:
    """Deterministic split assignment: a pure function of (id, seed, fractions)."""
    if not fractions:
        raise ValueError("fractions must not be empty")
    total = sum(fractions.values())
    if any(f < 0 for f in fractions.values()) or abs(total - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    digest = hashlib.sha256(f"{seed}:{pair_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    acc = 0.0
    names = list(fractions)
    for name in names:
        acc += fractions[name]
        if u < acc:
            return name
    return names[-1]


def scan_pairs(
    root: str | Path,
    seed: int = 0,
    fractions: dict[str, float] | None = None,
) -> DatasetManifest:
    """Walk root for PNG tiles, pair SAR with optical, and assign splits."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root is not a directory: {root}")
    fractions = dict(fractions) if fractions else dict(DEFAULT_FRACTIONS)

    by_kind: dict[str, dict[str, str]] = {"s1": {}, "s2": {}}
    unmatched: list[str] = []
    for path in sorted(root.rglob("*.png")):
        rel = path.relative_to(root).as_posix()
        kind, pid = classify_path(rel)
        if kind is None:
            unmatched.append(rel)
            continue
        if pid in by_kind[kind]:
            raise ValueError(f"duplicate pair id {pid!r}: {by_kind[kind][pid]} and {rel}")
        by_kind[kind][pid] = rel

    records = []
    for pid in sorted(by_kind["s1"].keys() & by_kind["s2"].keys()):
        records.append(
            PairRecord(id=pid, sar_path=by_kind["s1"][pid], optical_path=by_kind["s2"][pid])
        )
    paired = {r.id for r in records}
    for kind in ("s1", "s2"):
        for pid, rel in by_kind[kind].items():
            if pid not in paired:
                unmatched.append(rel)
    for rel in sorted(unmatched):
        log.warning("skipping unpaired or unclassifiable file: %s", rel)

    if not records:
        raise EmptyDatasetError(f"no SAR/optical pairs found under {root}")

    splits = {r.id: assign_split(r.id, seed, fractions) for r in records}
    return DatasetManifest(
        root=str(root),
        records=tuple(records),
        splits=splits,
        seed=seed,
        orphans=tuple(sorted(unmatched)),
    )


def _decode(path: Path, pair_id: str) -> np.ndarray:
    """Read a PNG into float32 scaled to [0, 1] from its native bit depth."""
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img)
    except Exception as e:
        raise DecodeError(f"cannot decode {path} (pair {pair_id}): {e}") from e
    if arr.dtype == np.uint8:
        peak = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        peak = 65535.0
    else:
        raise DecodeError(f"unsupported pixel type {arr.dtype} in {path} (pair {pair_id})")
    return arr.astype(np.float32) / peak


def _stretch(plane: np.ndarray, percentiles: tuple[float, float]) -> np.ndarray:
    lo, hi = np.percentile(plane, percentiles)
    if hi <= lo:
        return plane
    return np.clip((plane - lo) / (hi - lo), 0.0, 1.0)


def _fit(arr: np.ndarray, target_size: int | None, crop: bool, pair_id: str) -> np.ndarray:
    h, w = arr.shape[:2]
    if target_size is None or (h == target_size and w == target_size):
        return arr
    if not crop or h < target_size or w < target_size:
        raise ValueError(
            f"pair {pair_id}: image is {h}x{w}, expected {target_size}x{target_size}"
        )
    top = (h - target_size) // 2
    left = (w - target_size) // 2
    return arr[top : top + target_size, left : left + target_size]


def load_pair(
    manifest: DatasetManifest,
    record: PairRecord,
    sar_channels: int = 1,
    target_size: int | None = None,
    crop: bool = True,
    sar_stretch: tuple[float, float] | None = None,
) -> PairedSample:
    """Decode one pair into model space: [-1, 1] tensors with matching H, W."""
    root = Path(manifest.root)
    sar = _decode(root / record.sar_path, record.id)
    opt = _decode(root / record.optical_path, record.id)

    if sar.ndim == 2:
        sar = sar[:, :, None]
    if sar.shape[2] != sar_channels:
        raise ValueError(
            f"pair {record.id}: SAR has {sar.shape[2]} channels, expected {sar_channels}"
        )
    if opt.ndim != 3 or opt.shape[2] < 3:
        raise ValueError(f"pair {record.id}: optical tile is not RGB (shape {opt.shape})")
    opt = opt[:, :, :3]

    sar = _fit(sar, target_size, crop, record.id)
    opt = _fit(opt, target_size, crop, record.id)
    if sar.shape[:2] != opt.shape[:2]:
        raise ValueError(
            f"pair {record.id}: SAR {sar.shape[:2]} and optical {opt.shape[:2]} sizes differ"
        )
    if sar_stretch is not None:
        sar = _stretch(sar, sar_stretch)

    sar_t = torch.from_numpy(np.ascontiguousarray(sar.transpose(2, 0, 1))) * 2.0 - 1.0
    opt_t = torch.from_numpy(np.ascontiguousarray(opt.transpose(2, 0, 1))) * 2.0 - 1.0
    return PairedSample(sar=sar_t, optical=opt_t, id=record.id)


def denormalize(img: torch.Tensor) -> torch.Tensor:
    """Model space [-1, 1] back to display space [0, 1], clamped."""
    return ((img + 1.0) / 2.0).clamp(0.0, 1.0)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Display-space tensor (C, H, W) to an HWC uint8 array for writing PNGs."""
    arr = img.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def save_png(img: torch.Tensor, path: str | Path) -> None:
    """Write a display-space tensor ((1|3), H, W) as an 8-bit PNG."""
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


@dataclass
class Batch:
    x0: torch.Tensor
    sar: torch.Tensor
    ids: list[str] = field(default_factory=list)


def batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    seed: int,
    epoch: int,
    sar_channels: int = 1,
    target_size: int | None = None,
    crop: bool = True,
    sar_stretch: tuple[float, float] | None = None,
):
    """Yield shuffled batches; order is a pure function of (seed, epoch).

    The final batch may be short. Raises EmptyDatasetError for empty splits.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    ids = manifest.ids(split)
    if not ids:
        raise EmptyDatasetError(f"split {split!r} has no samples")
    order = np.random.default_rng([seed, epoch]).permutation(len(ids))
    by_id = {r.id: r for r in manifest.records}
    for start in range(0, len(ids), batch_size):
        chunk = [ids[i] for i in order[start : start + batch_size]]
        samples = [
            load_pair(manifest, by_id[pid], sar_channels, target_size, crop, sar_stretch)
            for pid in chunk
        ]
        yield Batch(
            x0=torch.stack([s.optical for s in samples]),
            sar=torch.stack([s.sar for s in samples]),
            ids=chunk,
        )
