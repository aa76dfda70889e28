"""Report figures written to files (headless matplotlib)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width=6.0, height=None, ncols=1):
    height = height or width * GOLDEN
    fig, axes = plt.subplots(1, ncols, figsize=(width, height), squeeze=False)
    return fig, axes[0]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_fit_traces(traces, path):
    """Loss and training PSNR against step; ``traces`` maps a label to (step, loss, psnr, lr) rows."""
    fig, (ax_loss, ax_psnr) = _figure(10, 3.6, ncols=2)
    offset = 0
    for label, rows in traces.items():
        if not rows:
            continue
        arr = np.asarray(rows, dtype=np.float64)
        steps = arr[:, 0] + offset
        ax_loss.plot(steps, arr[:, 1], lw=0.8, label=label)
        ax_psnr.plot(steps, arr[:, 2], lw=0.8, label=label)
        offset = steps[-1] + 1
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("fitting step")
    ax_loss.set_ylabel("loss")
    ax_psnr.set_xlabel("fitting step")
    ax_psnr.set_ylabel("batch PSNR (dB)")
    if len(traces) > 1:
        ax_psnr.legend(fontsize=7)
    return _save(fig, path)


def plot_history(history, path):
    """Per-epoch test PSNR and refining loss (initial vs final) of a run."""
    fig, (ax_psnr, ax_ref) = _figure(10, 3.6, ncols=2)
    epochs = [h["epoch"] for h in history]
    test = [h.get("test_psnr", np.nan) for h in history]
    train = [h.get("train_psnr", np.nan) for h in history]
    ax_psnr.plot(epochs, train, "o-", label="train (batch)")
    ax_psnr.plot(epochs, test, "s-", label="test")
    ax_psnr.set_xlabel("epoch")
    ax_psnr.set_ylabel("PSNR (dB)")
    ax_psnr.legend(fontsize=7)
    refined = [h for h in history if h.get("refine_steps")]
    if refined:
        e = [h["epoch"] for h in refined]
        ax_ref.semilogy(e, [h["refine_loss_initial"] for h in refined], "o-", label="phase start")
        ax_ref.semilogy(e, [h["refine_loss_final"] for h in refined], "s-", label="phase end")
        ax_ref.legend(fontsize=7)
    else:
        ax_ref.text(0.5, 0.5, "no refining phases", ha="center", va="center", transform=ax_ref.transAxes)
    ax_ref.set_xlabel("epoch")
    ax_ref.set_ylabel("refining loss")
    return _save(fig, path)


def plot_metrics(report, path):
    """Per-image PSNR and SSIM bars with the mean marked."""
    fig, (ax_p, ax_s) = _figure(10, 3.6, ncols=2)
    x = np.arange(len(report.names))
    ax_p.bar(x, report.psnr, color="C0")
    ax_p.axhline(report.mean_psnr, color="k", ls="--", lw=0.8)
    ax_p.set_ylabel("PSNR (dB)")
    ax_s.bar(x, report.ssim, color="C1")
    ax_s.axhline(report.mean_ssim, color="k", ls="--", lw=0.8)
    ax_s.set_ylabel("SSIM")
    ax_s.set_ylim(0, 1)
    for ax in (ax_p, ax_s):
        ax.set_xticks(x)
        ax.set_xticklabels(report.names, rotation=60, ha="right", fontsize=6)
    fig.suptitle(f"{report.scene} {report.mode}".strip() or None, fontsize=9)
    return _save(fig, path)


def plot_renders(renders, references, path, names=None):
    """Rendered images above their references, one column per image."""
    n = len(renders)
    fig, axes = plt.subplots(2, max(n, 1), figsize=(1.8 * max(n, 1), 3.8), squeeze=False)
    for k in range(n):
        for row, img in enumerate((renders[k], references[k])):
            ax = axes[row, k]
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        if names:
            axes[0, k].set_title(names[k], fontsize=6)
    axes[0, 0].set_ylabel("render", fontsize=8)
    axes[1, 0].set_ylabel("reference", fontsize=8)
    return _save(fig, path)
