"""Feature decoding: positional encoding, density MLP and view-dependent color MLP.

The MLPs are plain ReLU stacks whose backward pass is written out by hand;
``FieldDecoder`` owns the parameters and exposes autograd-aware entry points.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputDomainError, NumericDomainError

DENSITY_SHIFT = 1.0


def positional_encoding(p, order):
    """(sin, cos) of 2^l * pi * p for l < order, axis-major then frequency.

    Returns a (..., 2 * order * D) tensor; ``order == 0`` gives an empty last axis.
    """
    if order < 0:
        raise InputDomainError("encoding order must be nonnegative")
    freqs = math.pi * (2.0 ** torch.arange(order, dtype=p.dtype))
    arg = p[..., :, None] * freqs
    enc = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
    return enc.reshape(*p.shape[:-1], p.shape[-1] * order * 2)


def _first_layer(parts, weight, bias):
    """Affine map of the concatenation of ``parts`` without materialising it.

    Parts may broadcast against each other (e.g. one view code per ray shared by
    all samples on it).
    """
    z = bias
    start = 0
    for x in parts:
        width = x.shape[-1]
        if width:
            z = z + x @ weight[:, start:start + width].T
        start += width
    return z


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis, keepdim=True)
    return g


def mlp_forward(parts, weights, biases):
    """ReLU MLP with a linear last layer over concatenated ``parts``; returns (output, cache)."""
    if isinstance(parts, torch.Tensor):
        parts = [parts]
    h = torch.relu(_first_layer(parts, weights[0], biases[0])) if len(weights) > 1 else None
    hidden = [h]
    if len(weights) == 1:
        return _first_layer(parts, weights[0], biases[0]), (parts, hidden)
    for w, b in zip(weights[1:-1], biases[1:-1]):
        h = torch.relu(h @ w.T + b)
        hidden.append(h)
    return h @ weights[-1].T + biases[-1], (parts, hidden)


def mlp_backward(weights, cache, upstream):
    """Gradients w.r.t. each input part and every weight and bias.

    Returns (list of part gradients, weight gradients, bias gradients); a part
    that was broadcast receives its gradient summed over the broadcast axes.
    """
    parts, hidden = cache
    n = len(weights)
    grad_w = [None] * n
    grad_b = [None] * n
    g = upstream
    for k in range(n - 1, 0, -1):
        h = hidden[k - 1]
        g2 = g.reshape(-1, g.shape[-1])
        grad_w[k] = g2.T @ h.reshape(-1, h.shape[-1])
        grad_b[k] = g2.sum(0)
        g = torch.ops.aten.threshold_backward(g @ weights[k], h, 0)
    grad_b[0] = g.reshape(-1, g.shape[-1]).sum(0)
    grad_parts = []
    w_blocks = []
    start = 0
    for x in parts:
        width = x.shape[-1]
        w_k = weights[0][:, start:start + width]
        start += width
        if width == 0:
            w_blocks.append(w_k.new_zeros(w_k.shape))
            grad_parts.append(torch.zeros_like(x))
            continue
        if x.shape[:-1] == g.shape[:-1]:
            gx = g
        else:
            gx = _unbroadcast(g, (*x.shape[:-1], g.shape[-1]))
        w_blocks.append(gx.reshape(-1, gx.shape[-1]).T @ x.reshape(-1, width))
        grad_parts.append(gx @ w_k)
    grad_w[0] = torch.cat(w_blocks, dim=1)
    return grad_parts, grad_w, grad_b


def decode_density(f, weights, biases):
    """Density (shifted softplus of the first output) and the remaining raw features."""
    if not bool(torch.isfinite(f).all()):
        raise NumericDomainError("non-finite plane features")
    raw, cache = mlp_forward(f, weights, biases)
    sigma = F.softplus(raw[..., 0] - DENSITY_SHIFT)
    return sigma, raw[..., 1:], (raw, cache)


def decode_density_backward(weights, saved, grad_sigma, grad_feat):
    raw, cache = saved
    g_raw = torch.empty_like(raw)
    g_raw[..., 0] = grad_sigma * torch.sigmoid(raw[..., 0] - DENSITY_SHIFT)
    g_raw[..., 1:] = grad_feat
    (g_f,), gw, gb = mlp_backward(weights, cache, g_raw)
    return g_f, gw, gb


def decode_color(f_hat, d_enc, e, weights, biases):
    """RGB in (0, 1) from features, encoded view direction and optional appearance code.

    The inputs are concatenated along the last axis; leading axes may broadcast,
    so per-ray ``d_enc``/``e`` of shape (R, 1, .) pair with (R, S, .) features.
    """
    parts = [f_hat, d_enc] if e is None else [f_hat, d_enc, e]
    width = sum(x.shape[-1] for x in parts)
    if width != weights[0].shape[1]:
        raise InputDomainError(f"color decoder expects {weights[0].shape[1]} inputs, got {width}")
    raw, cache = mlp_forward(parts, weights, biases)
    return torch.sigmoid(raw), cache


def decode_color_backward(weights, cache, rgb, upstream):
    return mlp_backward(weights, cache, upstream * rgb * (1 - rgb))


class _Density(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f, n_layers, *params):
        weights, biases = list(params[:n_layers]), list(params[n_layers:])
        sigma, feat, saved = decode_density(f, weights, biases)
        ctx.saved = saved
        ctx.weights = weights
        return sigma, feat

    @staticmethod
    def backward(ctx, grad_sigma, grad_feat):
        g_f, gw, gb = decode_density_backward(ctx.weights, ctx.saved, grad_sigma, grad_feat)
        return (g_f, None, *gw, *gb)


class _Color(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_hat, d_enc, e, n_layers, *params):
        weights, biases = list(params[:n_layers]), list(params[n_layers:])
        rgb, cache = decode_color(f_hat, d_enc, e, weights, biases)
        ctx.cache = cache
        ctx.weights = weights
        ctx.has_e = e is not None
        ctx.save_for_backward(rgb)
        return rgb

    @staticmethod
    def backward(ctx, upstream):
        (rgb,) = ctx.saved_tensors
        grads_in, gw, gb = decode_color_backward(ctx.weights, ctx.cache, rgb, upstream)
        g_e = grads_in[2] if ctx.has_e else None
        return (grads_in[0], grads_in[1], g_e, None, *gw, *gb)


def _linear_init(fan_in, fan_out, generator, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    w = (torch.rand((fan_out, fan_in), generator=generator, dtype=torch.float64) * 2 - 1) * bound
    b = (torch.rand((fan_out,), generator=generator, dtype=torch.float64) * 2 - 1) * bound
    return nn.Parameter(w.to(dtype)), nn.Parameter(b.to(dtype))


class FieldDecoder(nn.Module):
    """Density MLP, color MLP and an optional per-image appearance table.

    Args:
        channels: plane feature width C (input of the density MLP).
        hidden: hidden width of both MLPs.
        n_hidden: number of hidden layers in each MLP.
        feat_dim: width of the extra features passed from density to color MLP.
        pe_order: positional-encoding order L for view directions.
        n_images: rows of the appearance table; 0 disables appearance codes.
        appearance_dim: width M of each appearance code.
    """

    def __init__(self, channels, hidden=64, n_hidden=2, feat_dim=15, pe_order=4,
                 n_images=0, appearance_dim=32, generator=None, dtype=torch.float32):
        super().__init__()
        self.channels = channels
        self.feat_dim = feat_dim
        self.pe_order = pe_order
        self.appearance_dim = appearance_dim if n_images > 0 else 0
        self.sigma_w, self.sigma_b = self._stack(
            [channels] + [hidden] * n_hidden + [1 + feat_dim], generator, dtype)
        color_in = feat_dim + 6 * pe_order + self.appearance_dim
        self.rgb_w, self.rgb_b = self._stack(
            [color_in] + [hidden] * n_hidden + [3], generator, dtype)
        if n_images > 0:
            codes = 0.1 * torch.randn((n_images, appearance_dim), generator=generator, dtype=torch.float64)
            self.appearance = nn.Parameter(codes.to(dtype))
        else:
            self.appearance = None

    @staticmethod
    def _stack(widths, generator, dtype):
        ws, bs = nn.ParameterList(), nn.ParameterList()
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w, b = _linear_init(fan_in, fan_out, generator, dtype)
            ws.append(w)
            bs.append(b)
        return ws, bs

    def config(self):
        return {
            "channels": self.channels,
            "hidden": self.sigma_w[0].shape[0],
            "n_hidden": len(self.sigma_w) - 1,
            "feat_dim": self.feat_dim,
            "pe_order": self.pe_order,
            "n_images": 0 if self.appearance is None else self.appearance.shape[0],
            "appearance_dim": self.appearance_dim or 32,
        }

    def mlp_parameters(self):
        return [*self.sigma_w, *self.sigma_b, *self.rgb_w, *self.rgb_b]

    def density(self, f):
        """(sigma, f_hat) for aggregated features ``f`` (P, C)."""
        return _Density.apply(f, len(self.sigma_w), *self.sigma_w, *self.sigma_b)

    def color(self, f_hat, d_enc, e=None):
        if (e is None) != (self.appearance_dim == 0):
            raise InputDomainError("appearance code presence does not match decoder configuration")
        return _Color.apply(f_hat, d_enc, e, len(self.rgb_w), *self.rgb_w, *self.rgb_b)

    def encode_directions(self, d):
        return positional_encoding(d, self.pe_order)
