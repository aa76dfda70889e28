"""Three-plane feature grids with bilinear lookup, Hadamard aggregation and TV.

Every differentiable operation here comes as a plain forward function, an
explicit ``*_backward`` function, and a ``torch.autograd.Function`` wrapper so
the rendering pipeline can chain them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch

from .errors import InputDomainError, NumericDomainError

PLANES = ("xy", "xz", "yz")
_PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


@dataclass
class PlaneSet:
    """Feature grids stacked as (3, N, N, C) in ``PLANES`` order plus an AABB (2, 3)."""

    grids: torch.Tensor
    aabb: torch.Tensor

    def __post_init__(self):
        g = self.grids
        if g.ndim != 4 or g.shape[0] != 3 or g.shape[1] != g.shape[2]:
            raise InputDomainError(f"grids must have shape (3, N, N, C), got {tuple(g.shape)}")
        self.aabb = torch.as_tensor(self.aabb, dtype=torch.float64).reshape(2, 3)
        if not bool((self.aabb[0] < self.aabb[1]).all()):
            raise InputDomainError("aabb min must be below aabb max on every axis")

    @property
    def resolution(self):
        return self.grids.shape[1]

    @property
    def channels(self):
        return self.grids.shape[3]

    def plane(self, h):
        return self.grids[PLANES.index(h)]

    def check_finite(self):
        if not bool(torch.isfinite(self.grids).all()):
            raise NumericDomainError("plane grids contain non-finite values")

    def digest(self):
        data = self.grids.detach().to(torch.float32).contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()

    def to_image_stack(self):
        """Planes as one 3C-channel N x N image, channel-first."""
        n, c = self.resolution, self.channels
        return self.grids.permute(0, 3, 1, 2).reshape(3 * c, n, n)

    @classmethod
    def from_image_stack(cls, stack, aabb):
        """Inverse of :meth:`to_image_stack`; channels split in xy, xz, yz order."""
        c3, n, _ = stack.shape
        if c3 % 3:
            raise InputDomainError(f"channel count {c3} is not divisible by 3")
        grids = stack.reshape(3, c3 // 3, n, n).permute(0, 2, 3, 1)
        return cls(grids, aabb)


def init_planes(resolution, channels, aabb, generator=None, scale=1.0, dtype=torch.float32):
    """Standard-Gaussian planes, optionally rescaled."""
    grids = torch.randn((3, resolution, resolution, channels), generator=generator, dtype=torch.float64)
    return PlaneSet((scale * grids).to(dtype), aabb)


def normalize_point(q, aabb, resolution):
    """Map world points into grid space, box min -> 0 and box max -> N - 1, clamped."""
    aabb = torch.as_tensor(aabb, dtype=q.dtype)
    lo, hi = aabb[0], aabb[1]
    g = (q - lo) / (hi - lo) * (resolution - 1)
    return g.clamp(0.0, resolution - 1)


def project(q_grid, h):
    """Drop the coordinate absent from plane ``h``."""
    try:
        axes = _PLANE_AXES[h]
    except KeyError:
        raise InputDomainError(f"unknown plane id {h!r}; expected one of {PLANES}") from None
    return q_grid[..., list(axes)]


def _corners(n, p):
    """Flat indices (..., 4) of the enclosing cells and their bilinear weights (..., 4).

    Corner order is (i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1).
    """
    if p.shape[-1] != 2:
        raise InputDomainError("plane coordinates must be 2-D")
    if n < 2:
        raise InputDomainError("plane resolution must be at least 2")
    if bool((p < 0).any()) or bool((p > n - 1).any()):
        raise InputDomainError(f"plane coordinate outside [0, {n - 1}]")
    i0 = p[..., 0].floor().clamp(max=n - 2)
    j0 = p[..., 1].floor().clamp(max=n - 2)
    fx = p[..., 0] - i0
    fy = p[..., 1] - j0
    base = i0.long() * n + j0.long()
    idx = torch.stack([base, base + n, base + 1, base + n + 1], dim=-1)
    gx, gy = 1 - fx, 1 - fy
    w = torch.stack([gx * gy, fx * gy, gx * fy, fx * fy], dim=-1)
    return idx, w, fx, fy


def bilerp(plane, p):
    """Bilinearly interpolate ``plane`` (N, N, C) at points ``p`` (..., 2)."""
    n, _, c = plane.shape
    idx, w, _, _ = _corners(n, p)
    vals = plane.reshape(n * n, c)[idx]
    return (w[..., None] * vals).sum(-2)


def bilerp_backward(plane, p, upstream, need_point_grad=True):
    """Gradients of ``sum(upstream * bilerp(plane, p))`` w.r.t. the plane and ``p``.

    Corner weights route the upstream gradient into the grid; the point gradient
    is the analytic derivative of the bilinear blend.
    """
    n, _, c = plane.shape
    idx, w, fx, fy = _corners(n, p)
    flat = torch.zeros((n * n, c), dtype=upstream.dtype)
    flat.index_add_(0, idx.reshape(-1), (w[..., None] * upstream[..., None, :]).reshape(-1, c))
    grad_plane = flat.reshape(n, n, c)
    if not need_point_grad:
        return grad_plane, None
    v = plane.reshape(n * n, c)[idx]
    v00, v10, v01, v11 = v.unbind(-2)
    fx, fy = fx[..., None], fy[..., None]
    d_fx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    d_fy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
    grad_p = torch.stack([(d_fx * upstream).sum(-1), (d_fy * upstream).sum(-1)], dim=-1)
    return grad_plane, grad_p


def aggregate(f_xy, f_xz, f_yz):
    """Hadamard product of the three per-plane feature vectors."""
    if not f_xy.shape == f_xz.shape == f_yz.shape:
        raise InputDomainError("per-plane features must have equal shapes")
    return f_xy * f_xz * f_yz


def aggregate_backward(f_xy, f_xz, f_yz, upstream):
    return upstream * f_xz * f_yz, upstream * f_xy * f_yz, upstream * f_xy * f_xz


def tv_loss(grids):
    """Mean over planes of the squared-difference total variation of each plane.

    Each plane's sum runs over valid neighbour pairs along both spatial axes and
    is divided by C * N**2.
    """
    grids = grids.grids if isinstance(grids, PlaneSet) else grids
    n, c = grids.shape[1], grids.shape[3]
    if n < 2:
        raise InputDomainError("TV needs resolution of at least 2")
    d_row = grids[:, 1:] - grids[:, :-1]
    d_col = grids[:, :, 1:] - grids[:, :, :-1]
    per_plane = (d_row.pow(2).sum(dim=(1, 2, 3)) + d_col.pow(2).sum(dim=(1, 2, 3))) / (c * n * n)
    return per_plane.mean()


def tv_backward(grids):
    grids = grids.grids if isinstance(grids, PlaneSet) else grids
    k, n, c = grids.shape[0], grids.shape[1], grids.shape[3]
    scale = 2.0 / (k * c * n * n)
    d_row = grids[:, 1:] - grids[:, :-1]
    d_col = grids[:, :, 1:] - grids[:, :, :-1]
    grad = torch.zeros_like(grids)
    grad[:, 1:] += d_row
    grad[:, :-1] -= d_row
    grad[:, :, 1:] += d_col
    grad[:, :, :-1] -= d_col
    return scale * grad


class _PlaneFeatures(torch.autograd.Function):
    """Per-plane bilinear features for grid-space points, returned as (3, P, C).

    All three planes are gathered through one flat index so the backward pass is
    a single scatter-add.
    """

    @staticmethod
    def forward(ctx, grids, q_grid):
        k, n, _, c = grids.shape
        corners = [_corners(n, project(q_grid, h)) for h in PLANES]
        offsets = torch.arange(k).reshape(k, 1, 1) * (n * n)
        idx = torch.stack([cr[0] for cr in corners]) + offsets
        w = torch.stack([cr[1] for cr in corners])
        vals = grids.reshape(k * n * n, c)[idx]
        ctx.save_for_backward(grids, q_grid, idx, w)
        return (w[..., None] * vals).sum(-2)

    @staticmethod
    def backward(ctx, upstream):
        grids, q_grid, idx, w = ctx.saved_tensors
        k, n, _, c = grids.shape
        grad_grids = grad_q = None
        if ctx.needs_input_grad[0]:
            flat = torch.zeros((k * n * n, c), dtype=upstream.dtype)
            flat.index_add_(0, idx.reshape(-1), (w[..., None] * upstream[:, :, None, :]).reshape(-1, c))
            grad_grids = flat.reshape(grids.shape)
        if ctx.needs_input_grad[1]:
            grad_q = torch.zeros_like(q_grid)
            for i, h in enumerate(PLANES):
                _, g_p = bilerp_backward(grids[i], project(q_grid, h), upstream[i])
                grad_q[..., list(_PLANE_AXES[h])] += g_p
        return grad_grids, grad_q


class _Aggregate(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_xy, f_xz, f_yz):
        ctx.save_for_backward(f_xy, f_xz, f_yz)
        return aggregate(f_xy, f_xz, f_yz)

    @staticmethod
    def backward(ctx, upstream):
        return aggregate_backward(*ctx.saved_tensors, upstream)


class _TV(torch.autograd.Function):
    @staticmethod
    def forward(ctx, grids):
        ctx.save_for_backward(grids)
        return tv_loss(grids)

    @staticmethod
    def backward(ctx, upstream):
        (grids,) = ctx.saved_tensors
        return upstream * tv_backward(grids)


def plane_features(grids, q_grid):
    """Differentiable (3, P, C) per-plane features at grid-space points (P, 3)."""
    return _PlaneFeatures.apply(grids, q_grid)


def aggregate_fn(f_xy, f_xz, f_yz):
    return _Aggregate.apply(f_xy, f_xz, f_yz)


def tv_loss_fn(grids):
    return _TV.apply(grids)


def lookup(planes, q, grids=None):
    """Aggregated feature f(q) for world points ``q`` (P, 3); differentiable in the grids.

    ``grids`` overrides ``planes.grids`` (e.g. a leaf tensor being optimised).
    """
    grids = planes.grids if grids is None else grids
    q_grid = normalize_point(q, planes.aabb, grids.shape[1])
    f = plane_features(grids, q_grid)
    return aggregate_fn(f[0], f[1], f[2])
