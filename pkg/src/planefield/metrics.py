"""Image metrics, split evaluation, and feature-plane inspection export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import save_png
from .errors import InputDomainError
from .fitting import fit_appearance_code
from .planes import PLANES
from .rendering import render_image, to_numpy_image


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputDomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    err = mse(a, b)
    return math.inf if err == 0 else -10.0 * math.log10(err)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Gaussian-windowed SSIM over valid window positions, averaged over channels.

    Accepts (H, W) or (H, W, C) images.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise InputDomainError(f"image smaller than the {window}x{window} SSIM window")
    g = torch.from_numpy(gaussian_window(window, sigma))
    kernel = (g[:, None] * g[None, :])[None, None]

    def filt(x):
        return F.conv2d(torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[:, None], kernel)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass
class MetricReport:
    names: list
    psnr: list
    ssim: list
    mse: list
    scene: str = ""
    mode: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        # mean over images of per-image PSNR
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_mse(self):
        return float(np.mean(self.mse)) if self.mse else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene", "mode", "image", "psnr", "ssim", "mse"])
        for row in zip(self.names, self.psnr, self.ssim, self.mse):
            w.writerow([self.scene, self.mode, row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.8e}"])
        w.writerow([self.scene, self.mode, "mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}", f"{self.mean_mse:.8e}"])
        return buf.getvalue()

    def table(self):
        lines = [f"{'image':<16} {'PSNR':>8} {'SSIM':>7} {'MSE':>11}"]
        for name, p, s, m in zip(self.names, self.psnr, self.ssim, self.mse):
            lines.append(f"{name:<16} {p:8.3f} {s:7.4f} {m:11.4e}")
        lines.append(f"{'mean':<16} {self.mean_psnr:8.3f} {self.mean_ssim:7.4f} {self.mean_mse:11.4e}")
        return "\n".join(lines)


def evaluate(planes, decoder, dataset, split="test", n_samples=48, seed=0, scene="", mode="",
             appearance_epochs=10, appearance_batch=512, appearance_lr=0.1, return_images=False):
    """Render every image of ``split`` and score it.

    Without appearance codes the full image is scored. With them, a fresh code
    is fitted on the left half of each image and only the right half is scored.
    """
    names, ps, ss, ms, images = [], [], [], [], []
    gen = torch.Generator().manual_seed(seed)
    for k, i in enumerate(dataset.indices(split)):
        cam, gt = dataset.cameras[i], dataset.images[i]
        code = None
        if decoder.appearance is not None:
            code = fit_appearance_code(planes, decoder, gt, cam, dataset.near, dataset.far, n_samples, gen,
                                       appearance_epochs, appearance_batch, appearance_lr, dataset.background)
        img = to_numpy_image(render_image(planes, decoder, cam, dataset.near, dataset.far, n_samples,
                                          appearance=code, background=dataset.background))
        ref = np.asarray(gt, dtype=np.float64)
        if code is not None:
            half = cam.width // 2
            img_s, ref_s = img[:, half:], ref[:, half:]
        else:
            img_s, ref_s = img, ref
        names.append(dataset.names[i] if dataset.names else f"{split}_{k}")
        ps.append(psnr(img_s, ref_s))
        ss.append(ssim(img_s, ref_s) if min(img_s.shape[:2]) >= 11 else float("nan"))
        ms.append(mse(img_s, ref_s))
        if return_images:
            images.append(img)
    report = MetricReport(names, ps, ss, ms, scene, mode)
    return (report, images) if return_images else report


def normalize_channel(x):
    """Min-max normalize to [0, 1]; a constant channel maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def export_plane_inspection(planes, channels, out_dir, seed=0, count=2):
    """Write each selected channel of every plane as a grayscale PNG ``p_<plane>_<channel>.png``.

    ``channels`` is a list of indices or ``"random"`` (``count`` distinct
    channels drawn with ``seed``). Returns the written paths.
    """
    c = planes.channels
    if isinstance(channels, str):
        if channels != "random":
            raise InputDomainError(f"channel selection must be a list or 'random', got {channels!r}")
        rng = np.random.default_rng(seed)
        channels = sorted(int(v) for v in rng.choice(c, size=min(count, c), replace=False))
    channels = [int(v) for v in channels]
    for ch in channels:
        if not 0 <= ch < c:
            raise InputDomainError(f"channel {ch} outside [0, {c})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    grids = planes.grids.detach().cpu().numpy()
    for h, name in enumerate(PLANES):
        for ch in channels:
            path = out / f"p_{name}_{ch}.png"
            save_png(path, normalize_channel(grids[h, :, :, ch]))
            paths.append(path)
    return paths
