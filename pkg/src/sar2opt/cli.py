"""Command-line surface.

Subcommands:
    train <config> [--resume CKPT]
    sample <checkpoint> --sar <dir|file> --out <dir> --seed N [--ema] [--tile-size N]
    evaluate --generated <dir> --truth <dir> [--out CSV] [--fid EMBEDDER] [--figure PNG]
    inspect-schedule [<config>]
    make-fixture --out <dir> [--pairs N] [--size N] [--seed N]

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, schedule_from_fingerprint
from .config import TrainConfig, load_config
from .data import classify_path, denormalize, save_png
from .diffusion import sample as ancestral_sample
from .fixture import make_fixture
from .metrics import EMBEDDERS, evaluate, get_embedder
from .report import render_loss_curve, render_metric_figure
from .training import train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_display(path: Path) -> torch.Tensor:
    """Decode a PNG to a display-space (C, H, W) tensor in [0, 1]."""
    with Image.open(path) as img:
        img.load()
        arr = np.asarray(img)
    if arr.dtype == np.uint8:
        peak = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        peak = 65535.0
    else:
        raise RuntimeError(f"unsupported pixel type {arr.dtype} in {path}")
    arr = arr.astype(np.float32) / peak
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _center_crop(t: torch.Tensor, size: int, label: str) -> torch.Tensor:
    h, w = t.shape[-2:]
    if h == size and w == size:
        return t
    if h < size or w < size:
        raise RuntimeError(f"{label} is {h}x{w}, smaller than requested {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    return t[..., top : top + size, left : left + size]


def _image_seed(base_seed: int, rel_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}/{rel_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _cmd_train(args) -> int:
    config = load_config(args.config)
    final = train(config, resume=args.resume)
    log_path = Path(config.run.dir) / "loss.csv"
    if log_path.exists():
        figure = render_loss_curve(log_path)
        print(f"loss curve: {figure}")
    print(f"final checkpoint: {final}")
    return 0


def _cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model(use_ema=args.ema)
    model.eval()
    sched = schedule_from_fingerprint(ckpt.schedule_fingerprint)

    sar_root = Path(args.sar)
    if sar_root.is_dir():
        files = sorted(p for p in sar_root.rglob("*.png"))
        rels = [p.relative_to(sar_root).as_posix() for p in files]
    elif sar_root.is_file():
        files = [sar_root]
        rels = [sar_root.name]
    else:
        raise RuntimeError(f"SAR input not found: {sar_root}")
    if not files:
        raise RuntimeError(f"no PNG files under {sar_root}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    want_c = model.config.sar_channels
    for path, rel in zip(files, rels):
        sar = _load_display(path)
        if sar.shape[0] != want_c:
            raise RuntimeError(
                f"{path}: SAR has {sar.shape[0]} channels, model expects {want_c}"
            )
        if args.tile_size:
            sar = _center_crop(sar, args.tile_size, str(path))
        sar = sar * 2.0 - 1.0
        result = ancestral_sample(model, sar, sched, seed=_image_seed(args.seed, rel))
        out_path = out_dir / rel.replace("/", "_")
        save_png(denormalize(result), out_path)
        print(f"wrote {out_path}")
    return 0


def _pair_files(gen_dir: Path, truth_dir: Path) -> list[tuple[str, Path, Path]]:
    """Match generated to truth files by s1/s2-token-stripped path id."""

    def index(d: Path) -> dict[str, Path]:
        out: dict[str, Path] = {}
        for p in sorted(d.rglob("*.png")):
            _, pid = classify_path(p.relative_to(d).as_posix())
            out.setdefault(pid, p)
        return out

    gen_idx = index(gen_dir)
    truth_idx = index(truth_dir)
    pairs = []
    for pid in sorted(gen_idx.keys() & truth_idx.keys()):
        pairs.append((pid, gen_idx[pid], truth_idx[pid]))
    for pid in sorted(set(gen_idx) ^ set(truth_idx)):
        side = "truth" if pid in gen_idx else "generated"
        print(f"warning: no {side} counterpart for {pid}", file=sys.stderr)
    return pairs


def _cmd_evaluate(args) -> int:
    gen_dir, truth_dir = Path(args.generated), Path(args.truth)
    for d in (gen_dir, truth_dir):
        if not d.is_dir():
            raise RuntimeError(f"not a directory: {d}")
    matched = _pair_files(gen_dir, truth_dir)
    if not matched:
        raise RuntimeError(f"no matching pairs between {gen_dir} and {truth_dir}")

    embedder = get_embedder(args.fid) if args.fid else None
    report = evaluate(
        ((pid, _load_display(g), _load_display(t)) for pid, g, t in matched),
        embedder=embedder,
    )

    csv_text = report.to_csv()
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(csv_text)
        figure = Path(args.figure) if args.figure else out_path.with_suffix(".png")
        render_metric_figure(report, figure)
        print(f"report: {out_path}")
        print(f"figure: {figure}")
    else:
        sys.stdout.write(csv_text)
        if args.figure:
            render_metric_figure(report, Path(args.figure))
            print(f"figure: {args.figure}")
    print(report.summary())
    return 0


def _cmd_inspect_schedule(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    sched = config.schedule.build()
    print("t,beta,alpha_bar,sigma")
    for i in range(sched.T):
        beta = float(sched.betas[i])
        ab = float(sched.alpha_bars[i])
        sigma = float(sched.sigmas[i])
        print(f"{i + 1},{beta!r},{ab!r},{sigma!r}")
    return 0


def _cmd_make_fixture(args) -> int:
    out = make_fixture(args.out, n_pairs=args.pairs, size=args.size, seed=args.seed)
    print(f"fixture written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sar2opt", description="SAR-to-optical diffusion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="train a model from a YAML config")
    p_train.add_argument("config", help="path to the config file")
    p_train.add_argument("--resume", help="checkpoint to resume from", default=None)
    p_train.set_defaults(func=_cmd_train)

    p_sample = sub.add_parser("sample", help="translate SAR tiles with a trained checkpoint")
    p_sample.add_argument("checkpoint", help="checkpoint file")
    p_sample.add_argument("--sar", required=True, help="SAR PNG file or directory")
    p_sample.add_argument("--out", required=True, help="output directory")
    p_sample.add_argument("--seed", type=int, default=0, help="base sampling seed")
    p_sample.add_argument("--ema", action="store_true", help="use EMA parameters")
    p_sample.add_argument("--tile-size", type=int, default=None, help="center-crop SAR input")
    p_sample.set_defaults(func=_cmd_sample)

    p_eval = sub.add_parser("evaluate", help="score generated tiles against ground truth")
    p_eval.add_argument("--generated", required=True, help="directory of generated PNGs")
    p_eval.add_argument("--truth", required=True, help="directory of ground-truth PNGs")
    p_eval.add_argument("--out", default=None, help="write per-pair CSV here (default stdout)")
    p_eval.add_argument(
        "--fid",
        nargs="?",
        const="stats-proj-70",
        default=None,
        choices=sorted(EMBEDDERS),
        help="also compute the Fréchet distance with this embedder",
    )
    p_eval.add_argument("--figure", default=None, help="metric figure path")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sched = sub.add_parser("inspect-schedule", help="dump the noise schedule as CSV")
    p_sched.add_argument("config", nargs="?", default=None, help="optional config file")
    p_sched.set_defaults(func=_cmd_inspect_schedule)

    p_fix = sub.add_parser("make-fixture", help="generate the synthetic paired-tile fixture")
    p_fix.add_argument("--out", required=True, help="output directory")
    p_fix.add_argument("--pairs", type=int, default=32)
    p_fix.add_argument("--size", type=int, default=64)
    p_fix.add_argument("--seed", type=int, default=0)
    p_fix.set_defaults(func=_cmd_make_fixture)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    try:
        return args.func(args) or 0
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
