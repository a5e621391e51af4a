"""Figure rendering for training logs and metric reports.

Both entry points write a PNG next to the delimited output they visualize:
the training loss curve beside loss.csv, and a per-pair metric chart
beside the evaluation CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport


def render_loss_curve(log_path: str | Path, out_path: str | Path | None = None) -> Path:
    """Plot simple/color/total columns of a training log against step."""
    log_path = Path(log_path)
    out_path = Path(out_path) if out_path else log_path.with_suffix(".png")

    steps, simple, color, total = [], [], [], []
    with open(log_path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            simple.append(float(row["simple"]))
            color.append(float(row["color"]))
            total.append(float(row["total"]))
    if not steps:
        raise ValueError(f"no rows in training log {log_path}")

    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, total, label="total", color="tab:blue", linewidth=1.2)
    ax.plot(steps, simple, label="simple", color="tab:orange", linewidth=0.8, alpha=0.8)
    ax.plot(steps, color, label="color", color="tab:green", linewidth=0.8, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_metric_figure(report: MetricReport, out_path: str | Path) -> Path:
    """Chart per-pair PSNR and SSIM with their means marked."""
    out_path = Path(out_path)
    idx = range(report.count)
    psnrs = [min(r[1], 99.0) for r in report.rows]
    ssims = [r[2] for r in report.rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    ax1.bar(idx, psnrs, color="tab:blue")
    if report.count and report.mean_psnr == report.mean_psnr:  # skip NaN
        ax1.axhline(min(report.mean_psnr, 99.0), color="black", linestyle="--", linewidth=1)
    ax1.set_xlabel("pair")
    ax1.set_ylabel("PSNR (dB)")
    ax1.set_title("PSNR per pair")

    ax2.bar(idx, ssims, color="tab:green")
    ax2.axhline(report.mean_ssim, color="black", linestyle="--", linewidth=1)
    ax2.set_ylim(min(0.0, min(ssims, default=0.0)), 1.05)
    ax2.set_xlabel("pair")
    ax2.set_ylabel("SSIM")
    ax2.set_title("SSIM per pair")

    note = f"pairs={report.count}"
    if report.fid is not None:
        note += f"  fid={report.fid:.4f} ({report.embedder_name})"
    fig.suptitle(note)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
