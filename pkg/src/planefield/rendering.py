"""Volume-rendering quadrature and the plane-field renderer built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import planes as P
from .errors import InputDomainError
from .geometry import Rays, generate_rays, pixel_grid, sample_along_rays


@dataclass
class CompositeResult:
    color: torch.Tensor
    transmittance: torch.Tensor
    weights: torch.Tensor
    opacity: torch.Tensor


def _check_composite(sigma, rgb, delta):
    if sigma.shape != delta.shape or rgb.shape[:-1] != sigma.shape:
        raise InputDomainError("sigma, rgb and delta must agree on sample dimensions")
    if sigma.shape[-1] < 1:
        raise InputDomainError("need at least one sample")
    if bool((sigma < 0).any()):
        raise InputDomainError("negative density")
    if bool((delta <= 0).any()):
        raise InputDomainError("sample intervals must be positive")


def composite(sigma, rgb, delta):
    """Alpha-composite samples along the last axis.

    ``sigma`` and ``delta`` are (..., S), ``rgb`` is (..., S, 3). Transmittance
    is exp of the running negative optical depth, so it telescopes exactly.
    """
    _check_composite(sigma, rgb, delta)
    tau = sigma * delta
    depth = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(depth - tau))
    alpha = -torch.expm1(-tau)
    weights = trans * alpha
    color = (weights[..., None] * rgb).sum(-2)
    return CompositeResult(color, trans, weights, weights.sum(-1))


def composite_backward(sigma, rgb, delta, grad_color, grad_opacity=None):
    """Gradients of ``<grad_color, color> + <grad_opacity, opacity>`` w.r.t. sigma and rgb.

    With T_{i+1} the transmittance past sample i and S_i the color accumulated
    behind it, d color / d tau_i = c_i T_{i+1} - S_i and d opacity / d tau_i is
    the final transmittance.
    """
    tau = sigma * delta
    depth = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(depth - tau))
    t_next = torch.exp(-depth)
    weights = trans * (-torch.expm1(-tau))
    grad_rgb = weights[..., None] * grad_color[..., None, :]
    contrib = weights[..., None] * rgb
    behind = contrib.flip(-2).cumsum(-2).flip(-2) - contrib
    d_tau = ((rgb * t_next[..., None] - behind) * grad_color[..., None, :]).sum(-1)
    if grad_opacity is not None:
        d_tau = d_tau + grad_opacity[..., None] * t_next[..., -1:]
    return d_tau * delta, grad_rgb


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, sigma, rgb, delta):
        res = composite(sigma, rgb, delta)
        ctx.save_for_backward(sigma, rgb, delta)
        return res.color, res.opacity

    @staticmethod
    def backward(ctx, grad_color, grad_opacity):
        sigma, rgb, delta = ctx.saved_tensors
        g_sigma, g_rgb = composite_backward(sigma, rgb, delta, grad_color, grad_opacity)
        return g_sigma, g_rgb, None


def composite_fn(sigma, rgb, delta):
    """Differentiable (color, opacity)."""
    return _Composite.apply(sigma, rgb, delta)


def inside_aabb(q, aabb):
    """1 for points inside the closed box, 0 outside, in the dtype of ``q``."""
    aabb = torch.as_tensor(aabb, dtype=q.dtype)
    return ((q >= aabb[0]) & (q <= aabb[1])).all(-1).to(q.dtype)


def field_at(planes, decoder, q, dirs, codes=None, grids=None):
    """Density (R, S) and color (R, S, 3) at points ``q`` (R, S, 3) seen along ``dirs`` (R, 3).

    Density is zero outside the planes' bounding box.
    """
    n_rays, n_samples = q.shape[:2]
    f = P.lookup(planes, q.reshape(-1, 3), grids)
    sigma, f_hat = decoder.density(f)
    # clamped lookups would smear the box faces outward, so nothing outside the box is dense
    sigma = sigma * inside_aabb(q.reshape(-1, 3), planes.aabb)
    d_enc = decoder.encode_directions(dirs)[:, None, :]
    e = None if codes is None else codes[:, None, :]
    rgb = decoder.color(f_hat.reshape(n_rays, n_samples, -1), d_enc, e)
    return sigma.reshape(n_rays, n_samples), rgb


def render_rays(planes, decoder, rays, samples, codes=None, background=(1.0, 1.0, 1.0), grids=None):
    """Render a batch of rays to (R, 3) colors composited over ``background``."""
    sigma, rgb = field_at(planes, decoder, samples.q, rays.directions, codes, grids)
    color, opacity = composite_fn(sigma, rgb, samples.delta)
    bg = torch.as_tensor(background, dtype=color.dtype)
    return color + (1.0 - opacity)[:, None] * bg


def render_pixel(planes, decoder, ray_origin, ray_direction, samples, code=None, background=(1.0, 1.0, 1.0)):
    """Single-ray convenience wrapper over :func:`render_rays`."""
    rays = Rays(torch.as_tensor(ray_origin).reshape(1, 3), torch.as_tensor(ray_direction).reshape(1, 3))
    batch = type(samples)(samples.t.reshape(1, -1), samples.q.reshape(1, -1, 3), samples.delta.reshape(1, -1))
    codes = None if code is None else torch.as_tensor(code).reshape(1, -1)
    return render_rays(planes, decoder, rays, batch, codes, background)[0]


def appearance_codes(decoder, index, count):
    """Broadcast the appearance code for ``index`` (int, tensor code, or None)."""
    if decoder.appearance is None:
        return None
    if index is None:
        code = decoder.appearance.detach().mean(0)
    elif isinstance(index, torch.Tensor) and index.ndim == 1 and index.is_floating_point():
        code = index
    else:
        code = decoder.appearance.detach()[int(index)]
    return code.expand(count, -1)


def render_image(planes, decoder, camera, near, far, n_samples, appearance=None,
                 background=(1.0, 1.0, 1.0), chunk=4096, stratified=False, seed=0, tile_order=None):
    """Render a full H x W x 3 image in tiles of ``chunk`` rays.

    Stratified jitter for the whole image is drawn up front from ``seed``, so the
    result does not depend on tile order.
    """
    dtype = planes.grids.dtype
    rays = generate_rays(camera, pixel_grid(camera.height, camera.width), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    samples = sample_along_rays(rays, near, far, n_samples, stratified, gen)
    out = torch.empty((len(rays), 3), dtype=dtype)
    starts = list(range(0, len(rays), chunk))
    if tile_order is not None:
        starts = [starts[i] for i in tile_order]
    with torch.no_grad():
        for s in starts:
            sl = slice(s, s + chunk)
            part = type(samples)(samples.t[sl], samples.q[sl], samples.delta[sl])
            codes = appearance_codes(decoder, appearance, part.t.shape[0])
            out[sl] = render_rays(planes, decoder, rays[sl], part, codes, background)
    return out.reshape(camera.height, camera.width, 3)


def to_numpy_image(img):
    return np.clip(img.detach().cpu().numpy().astype(np.float64), 0.0, 1.0)
