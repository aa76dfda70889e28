"""Scene fitting: photometric + TV loss, Adam and the warmup-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import planes as P
from .errors import InputDomainError, NumericDomainError
from .geometry import Rays, generate_rays, pixel_grid, sample_along_rays
from .rendering import render_rays


@dataclass
class FitConfig:
    n1_steps: int = 30000
    batch_size: int = 4096
    lr_planes: float = 0.01
    lr_mlp: float = 0.01
    lr_appearance: float = 0.01
    lambda_tv: float = 1e-4
    warmup_steps: int = 512
    n_samples: int = 48
    stratified: bool = True
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    def __post_init__(self):
        for name in ("batch_size", "n_samples"):
            if getattr(self, name) < 1:
                raise InputDomainError(f"{name} must be positive")
        if self.n1_steps < 0 or self.warmup_steps < 0 or self.lambda_tv < 0:
            raise InputDomainError("step counts and lambda_tv must be nonnegative")
        for name in ("lr_planes", "lr_mlp", "lr_appearance"):
            if not getattr(self, name) > 0:
                raise InputDomainError(f"{name} must be positive")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` is a scalar or one value per parameter. A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputDomainError("params, grads and optimizer state differ in length")
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v, a in zip(params, grads, state.m, state.v, lrs):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or m.shape != p.shape:
                raise InputDomainError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-a / c1)
    return state


def warmup_cosine_lr(step, base_lr, warmup_steps, total_steps):
    """Linear ramp to ``base_lr`` over ``warmup_steps``, cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise InputDomainError("step must be nonnegative")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def psnr_from_mse(mse):
    return float("inf") if mse <= 0 else -10.0 * math.log10(mse)


@dataclass
class RayBank:
    """Every training pixel as a ray with its target color and appearance index."""

    rays: Rays
    rgb: torch.Tensor
    image_index: torch.Tensor

    def __len__(self):
        return len(self.rays)

    @classmethod
    def from_dataset(cls, dataset, split="train", dtype=torch.float32):
        origins, dirs, rgbs, idx = [], [], [], []
        for i in dataset.indices(split):
            cam = dataset.cameras[i]
            rays = generate_rays(cam, pixel_grid(cam.height, cam.width), dtype=dtype)
            origins.append(rays.origins)
            dirs.append(rays.directions)
            rgbs.append(torch.as_tensor(dataset.images[i], dtype=dtype).reshape(-1, 3))
            idx.append(torch.full((len(rays),), int(dataset.appearance_index[i]), dtype=torch.long))
        if not origins:
            raise InputDomainError(f"split {split!r} has no images")
        return cls(Rays(torch.cat(origins), torch.cat(dirs)), torch.cat(rgbs), torch.cat(idx))


@dataclass
class FitLoss:
    total: torch.Tensor
    mse: torch.Tensor
    tv: torch.Tensor


def fitting_loss(planes, decoder, rays, samples, target, image_index, lambda_tv,
                 background=(1.0, 1.0, 1.0), grids=None, codes=None):
    """Batch MSE between rendered and target colors plus ``lambda_tv`` times plane TV.

    ``codes`` overrides the appearance lookup (used for test-time code fitting).
    Call ``.total.backward()`` for gradients of planes, MLPs and appearance codes.
    """
    if len(rays) == 0:
        raise InputDomainError("empty ray batch")
    grids = planes.grids if grids is None else grids
    if codes is None and decoder.appearance is not None:
        codes = decoder.appearance[image_index]
    pred = render_rays(planes, decoder, rays, samples, codes, background, grids=grids)
    mse = ((pred - target) ** 2).mean()
    tv = P.tv_loss_fn(grids) if lambda_tv > 0 else torch.zeros((), dtype=mse.dtype)
    return FitLoss(mse + lambda_tv * tv, mse, tv)


@dataclass
class FitTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def append(self, step, loss, mse, lr):
        self.step.append(step)
        self.loss.append(loss)
        self.psnr.append(psnr_from_mse(mse))
        self.lr.append(lr)

    def rows(self):
        return list(zip(self.step, self.loss, self.psnr, self.lr))


def fit_scene(planes, decoder, bank, config, near, far, generator, background=(1.0, 1.0, 1.0)):
    """Run ``config.n1_steps`` Adam steps on planes, MLPs and appearance codes.

    Rays are drawn uniformly with replacement from ``bank``. Optimizer moments
    and the schedule start fresh on every call. ``planes.grids`` is replaced by
    the optimised tensor; decoder parameters are updated in place.
    """
    grids = planes.grids.detach().clone().requires_grad_(True)
    params = [grids] + decoder.mlp_parameters()
    lrs = [config.lr_planes] + [config.lr_mlp] * len(decoder.mlp_parameters())
    if decoder.appearance is not None:
        params.append(decoder.appearance)
        lrs.append(config.lr_appearance)
    state = AdamState.zeros_like(params)
    trace = FitTrace()
    for step in range(config.n1_steps):
        factor = warmup_cosine_lr(step, 1.0, config.warmup_steps, config.n1_steps)
        idx = torch.randint(len(bank), (config.batch_size,), generator=generator)
        rays = bank.rays[idx]
        samples = sample_along_rays(rays, near, far, config.n_samples, config.stratified, generator)
        for p in params:
            p.grad = None
        out = fitting_loss(planes, decoder, rays, samples, bank.rgb[idx], bank.image_index[idx],
                           config.lambda_tv, background, grids=grids)
        out.total.backward()
        loss = float(out.total.detach())
        if not math.isfinite(loss):
            raise NumericDomainError(f"fitting loss became non-finite at step {step}")
        adam_step(params, [p.grad for p in params], state, [a * factor for a in lrs],
                  config.betas, config.eps)
        trace.append(step, loss, float(out.mse.detach()), config.lr_planes * factor)
    for p in params:
        p.grad = None
    planes.grids = grids.detach()
    return planes, trace


def fit_appearance_code(planes, decoder, image, camera, near, far, n_samples, generator,
                        epochs=10, batch_size=512, lr=0.1, background=(1.0, 1.0, 1.0)):
    """Optimise a fresh appearance code on the left half of ``image``; everything else frozen.

    One epoch is one pass over the left-half pixels in shuffled batches. The code
    starts at the mean of the training table.
    """
    if decoder.appearance is None:
        return None
    h, w = image.shape[:2]
    pix = pixel_grid(h, w)
    pix = pix[pix[:, 1] < w // 2]
    rays = generate_rays(camera, pix, dtype=planes.grids.dtype)
    target = torch.as_tensor(np.asarray(image)[pix[:, 0], pix[:, 1]], dtype=planes.grids.dtype)
    code = decoder.appearance.detach().mean(0).clone().requires_grad_(True)
    state = AdamState.zeros_like([code])
    frozen = [p.requires_grad for p in decoder.mlp_parameters()]
    for p in decoder.mlp_parameters():
        p.requires_grad_(False)
    try:
        for _ in range(epochs):
            order = torch.randperm(len(rays), generator=generator)
            for s in range(0, len(order), batch_size):
                idx = order[s:s + batch_size]
                batch = rays[idx]
                samples = sample_along_rays(batch, near, far, n_samples, True, generator)
                code.grad = None
                out = fitting_loss(planes, decoder, batch, samples, target[idx], None, 0.0, background,
                                   codes=code.expand(len(idx), -1))
                out.total.backward()
                adam_step([code], [code.grad], state, lr)
    finally:
        for p, flag in zip(decoder.mlp_parameters(), frozen):
            p.requires_grad_(flag)
    return code.detach()
