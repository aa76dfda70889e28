"""Scene refining: a frozen conv prior with LoRA adapters and a trainable plane decoder.

The prior maps a fixed latent (c, n, n) to a latent of the same shape in one
forward pass. The plane decoder upsamples that latent to a 3C-channel N x N
image that is split into the three feature planes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.grad import conv2d_input, conv2d_weight

from .errors import InputDomainError, NumericDomainError
from .fitting import AdamState, adam_step
from .planes import PlaneSet


# ---------------------------------------------------------------------------
# LoRA on a convolution


def lora_delta(lora_a, lora_b, weight_shape):
    """Low-rank kernel update B @ A reshaped to the conv weight layout."""
    return (lora_b @ lora_a).reshape(weight_shape)


def _check_lora(x, weight, lora_a, lora_b):
    out_ch, in_ch, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise InputDomainError(f"input must be (B, {in_ch}, H, W), got {tuple(x.shape)}")
    r = lora_a.shape[0]
    if lora_a.shape != (r, in_ch * kh * kw) or lora_b.shape != (out_ch, r):
        raise InputDomainError(
            f"adapter shapes A{tuple(lora_a.shape)} B{tuple(lora_b.shape)} do not fit kernel {tuple(weight.shape)}")


def lora_conv_forward(x, weight, bias, lora_a, lora_b, scale=1.0, stride=1, padding=1):
    """Frozen conv plus the factored low-rank branch: W0 x + b0 + scale * B (A x)."""
    _check_lora(x, weight, lora_a, lora_b)
    out_ch, in_ch, kh, kw = weight.shape
    y = F.conv2d(x, weight, bias, stride, padding)
    ax = F.conv2d(x, lora_a.reshape(-1, in_ch, kh, kw), None, stride, padding)
    return y + scale * torch.einsum("or,brhw->bohw", lora_b, ax)


def lora_conv_merged(x, weight, bias, lora_a, lora_b, scale=1.0, stride=1, padding=1):
    """Same map evaluated with the merged kernel W0 + scale * B A."""
    _check_lora(x, weight, lora_a, lora_b)
    return F.conv2d(x, weight + scale * lora_delta(lora_a, lora_b, weight.shape), bias, stride, padding)


def lora_conv_backward(x, weight, lora_a, lora_b, scale, stride, padding, upstream, need_input=True):
    """Gradients to the input, A and B. The frozen kernel and bias get none.

    The kernel gradient G (flattened to out x k) is shared: dB = scale G A^T and
    dA = scale B^T G.
    """
    g_kernel = conv2d_weight(x, weight.shape, upstream, stride, padding).reshape(weight.shape[0], -1)
    grad_b = scale * g_kernel @ lora_a.T
    grad_a = scale * lora_b.T @ g_kernel
    grad_x = None
    if need_input:
        merged = weight + scale * lora_delta(lora_a, lora_b, weight.shape)
        grad_x = conv2d_input(x.shape, merged, upstream, stride, padding)
    return grad_x, grad_a, grad_b


class _LoraConv(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, lora_a, lora_b, scale, stride, padding):
        ctx.save_for_backward(x, weight, lora_a, lora_b)
        ctx.conf = (scale, stride, padding)
        return lora_conv_forward(x, weight, bias, lora_a, lora_b, scale, stride, padding)

    @staticmethod
    def backward(ctx, upstream):
        x, weight, lora_a, lora_b = ctx.saved_tensors
        scale, stride, padding = ctx.conf
        gx, ga, gb = lora_conv_backward(x, weight, lora_a, lora_b, scale, stride, padding,
                                        upstream, ctx.needs_input_grad[0])
        if not ctx.needs_input_grad[3]:
            ga = None
        if not ctx.needs_input_grad[4]:
            gb = None
        return gx, None, None, ga, gb, None, None, None


def lora_forward(x, weight, bias, lora_a, lora_b, scale=1.0, stride=1, padding=1):
    """Differentiable LoRA conv; gradients reach ``x``, A and B only."""
    return _LoraConv.apply(x, weight, bias, lora_a, lora_b, scale, stride, padding)


def _uniform(shape, bound, generator):
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound


class LoraConv2d(nn.Module):
    """3x3 (or k x k) convolution with a frozen base kernel and a rank-r adapter.

    Before :meth:`freeze` the base kernel is an ordinary trainable parameter
    (used while pretraining the prior); afterwards only A and B can learn.
    """

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, rank=4, scale=1.0, generator=None):
        super().__init__()
        k = in_ch * kernel_size * kernel_size
        if rank < 1 or rank > min(out_ch, k):
            raise InputDomainError(f"LoRA rank {rank} must lie in [1, {min(out_ch, k)}]")
        bound = 1.0 / math.sqrt(k)
        self.weight = nn.Parameter(_uniform((out_ch, in_ch, kernel_size, kernel_size), math.sqrt(3) * bound, generator).float())
        self.bias = nn.Parameter(_uniform((out_ch,), bound, generator).float())
        self.lora_a = nn.Parameter(_uniform((rank, k), bound, generator).float())
        self.lora_b = nn.Parameter(torch.zeros(out_ch, rank))
        self.scale = scale
        self.stride = stride
        self.padding = kernel_size // 2
        self.frozen = False

    def freeze(self):
        self.weight.requires_grad_(False)
        self.bias.requires_grad_(False)
        self.frozen = True

    def forward(self, x):
        if not self.frozen:
            return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return lora_forward(x, self.weight, self.bias, self.lora_a, self.lora_b,
                            self.scale, self.stride, self.padding)


class _NormAct(nn.Module):
    """GroupNorm, SiLU, then a LoRA conv."""

    def __init__(self, in_ch, out_ch, rank, scale, generator, stride=1):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv = LoraConv2d(in_ch, out_ch, stride=stride, rank=rank, scale=scale, generator=generator)

    def forward(self, x):
        return self.conv(F.silu(self.norm(x)))


class PriorNet(nn.Module):
    """Three-level conv encoder-decoder with skip connections, latent in = latent out."""

    def __init__(self, channels=4, base=32, rank=4, lora_scale=1.0, generator=None):
        super().__init__()
        w1, w2 = base, 2 * base
        kw = dict(rank=rank, scale=lora_scale, generator=generator)
        self.channels = channels
        self.arch = {"channels": channels, "base": base, "rank": rank, "lora_scale": lora_scale}
        self.inc = LoraConv2d(channels, w1, **kw)
        self.enc1 = _NormAct(w1, w1, **kw)
        self.down1 = _NormAct(w1, w2, stride=2, **kw)
        self.enc2 = _NormAct(w2, w2, **kw)
        self.down2 = _NormAct(w2, w2, stride=2, **kw)
        self.mid = _NormAct(w2, w2, **kw)
        self.up2 = _NormAct(w2 + w2, w2, **kw)
        self.up1 = _NormAct(w2 + w1, w1, **kw)
        self.out = _NormAct(w1, channels, **kw)

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise InputDomainError("latent size must be divisible by 4")
        h1 = self.enc1(self.inc(x))
        h2 = self.enc2(self.down1(h1))
        h3 = self.mid(self.down2(h2))
        u2 = self.up2(torch.cat([F.interpolate(h3, scale_factor=2.0, mode="nearest"), h2], 1))
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2.0, mode="nearest"), h1], 1))
        return self.out(u1)

    def lora_modules(self):
        return [m for m in self.modules() if isinstance(m, LoraConv2d)]

    def lora_parameters(self):
        return [p for m in self.lora_modules() for p in (m.lora_a, m.lora_b)]

    def base_parameters(self):
        """Every weight that is frozen after pretraining (conv kernels, biases, norms)."""
        lora = {id(p) for p in self.lora_parameters()}
        return [p for p in self.parameters() if id(p) not in lora]

    def freeze(self):
        for m in self.lora_modules():
            m.freeze()
        for p in self.base_parameters():
            p.requires_grad_(False)
        return self

    def base_digest(self):
        return tensor_digest(self.base_parameters())


def tensor_digest(tensors):
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# plane decoder and fixed latent


class PlaneDecoder(nn.Module):
    """Upsampling conv stack from a (c, n, n) latent to a (3C, N, N) plane image.

    The head convolution has no bias, so zero penultimate activations give zero planes.
    """

    def __init__(self, latent_channels, latent_res, resolution, plane_channels, width=64, generator=None):
        super().__init__()
        if resolution < latent_res:
            raise InputDomainError("plane resolution must be at least the latent resolution")
        self.resolution = resolution
        self.plane_channels = plane_channels
        n_up = math.ceil(math.log2(resolution / latent_res)) if resolution > latent_res else 0
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.ups = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(n_up))
        self.norms = nn.ModuleList(nn.GroupNorm(min(8, width), width) for _ in range(n_up))
        self.head = nn.Conv2d(width, 3 * plane_channels, 3, padding=1, bias=False)
        for conv in [self.conv_in, *self.ups, self.head]:
            fan_in = conv.weight[0].numel()
            with torch.no_grad():
                conv.weight.copy_(_uniform(conv.weight.shape, math.sqrt(3.0 / fan_in), generator))
                if conv.bias is not None:
                    conv.bias.copy_(_uniform(conv.bias.shape, 1.0 / math.sqrt(fan_in), generator))

    def features(self, z):
        h = F.silu(self.conv_in(z))
        for k, (conv, norm) in enumerate(zip(self.ups, self.norms)):
            last = k == len(self.ups) - 1
            size = self.resolution if last else 2 * h.shape[-1]
            h = F.interpolate(h, size=(size, size), mode="nearest")
            h = F.silu(norm(conv(h)))
        return h

    def forward(self, z):
        return self.head(self.features(z))


@dataclass
class FixedLatent:
    x: torch.Tensor
    seed: int

    @classmethod
    def sample(cls, channels, size, seed):
        g = torch.Generator().manual_seed(seed)
        return cls(torch.randn((channels, size, size), generator=g, dtype=torch.float64).float(), seed)

    def digest(self):
        return tensor_digest([self.x])


@dataclass
class PriorStack:
    prior: PriorNet
    decoder: PlaneDecoder
    latent: FixedLatent
    train_lora: bool = True

    def trainable(self):
        params = list(self.decoder.parameters())
        if self.train_lora:
            params += self.prior.lora_parameters()
        return params


def infer_planes(stack, aabb):
    """One forward pass x -> prior -> plane decoder, split into (xy, xz, yz) planes."""
    out = stack.decoder(stack.prior(stack.latent.x[None].to(stack.decoder.head.weight.dtype)))[0]
    return PlaneSet.from_image_stack(out, aabb)


# ---------------------------------------------------------------------------
# refining objective


class _SquaredDistance(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inferred, target, mean):
        diff = inferred - target
        ctx.save_for_backward(diff)
        ctx.mean = mean
        total = diff.pow(2).sum()
        return total / diff.numel() if mean else total

    @staticmethod
    def backward(ctx, upstream):
        (diff,) = ctx.saved_tensors
        g = 2.0 * diff * upstream
        if ctx.mean:
            g = g / diff.numel()
        return g, -g, None


def refining_loss(inferred, target, reduction="sum"):
    """Squared L2 distance between inferred and target grids (``sum`` or ``mean``)."""
    a = inferred.grids if isinstance(inferred, PlaneSet) else inferred
    b = target.grids if isinstance(target, PlaneSet) else target
    if a.shape != b.shape:
        raise InputDomainError(f"plane shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if reduction not in ("sum", "mean"):
        raise InputDomainError(f"unknown reduction {reduction!r}")
    return _SquaredDistance.apply(a, b.detach(), reduction == "mean")


@dataclass
class RefineTrace:
    loss: list = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def initial_loss(self):
        return self.loss[0] if self.loss else self.final_loss


def refine_scene(stack, target, n2_steps, lr_lora=1e-4, lr_decoder=None, reduction="sum",
                 betas=(0.9, 0.999), eps=1e-8):
    """Fit the stack's output to ``target`` for ``n2_steps`` Adam steps; return (P_eps, trace).

    Optimizer moments start fresh on every call. ``trace.loss[s]`` is the loss
    before update ``s``; ``trace.final_loss`` is measured on the returned planes.
    """
    lr_decoder = lr_lora if lr_decoder is None else lr_decoder
    dec_params = list(stack.decoder.parameters())
    lora_params = stack.prior.lora_parameters() if stack.train_lora else []
    params = dec_params + lora_params
    lrs = [lr_decoder] * len(dec_params) + [lr_lora] * len(lora_params)
    for p in stack.prior.lora_parameters():
        p.requires_grad_(stack.train_lora)
    state = AdamState.zeros_like(params)
    trace = RefineTrace()
    target_grids = target.grids.detach()
    for step in range(n2_steps):
        for p in params:
            p.grad = None
        loss = refining_loss(infer_planes(stack, target.aabb), target_grids, reduction)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericDomainError(f"refining loss became non-finite at step {step}")
        trace.loss.append(value)
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lrs, betas, eps)
    for p in params:
        p.grad = None
    with torch.no_grad():
        refined = infer_planes(stack, target.aabb)
        refined = PlaneSet(refined.grids.detach().clone(), target.aabb)
        trace.final_loss = float(refining_loss(refined, target_grids, reduction))
    return refined, trace


# ---------------------------------------------------------------------------
# pretraining


def denoising_loss(prior, clean, generator):
    """MSE of the clean-latent prediction from a randomly noised input."""
    b = clean.shape[0]
    alpha = torch.rand((b, 1, 1, 1), generator=generator, dtype=clean.dtype)
    noise = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    noisy = alpha.sqrt() * clean + (1 - alpha).sqrt() * noise
    return F.mse_loss(prior(noisy), clean)


def pretrain_prior(corpus, steps, seed, channels=None, base=32, rank=4, lora_scale=1.0,
                   lr=1e-3, batch_size=16, log=None):
    """Train a :class:`PriorNet` as a denoiser on ``corpus`` (K, c, n, n), then freeze it.

    ``steps = 0`` returns the frozen random initialisation.
    """
    if corpus is None or len(corpus) == 0:
        raise InputDomainError("pretraining corpus is empty")
    g = torch.Generator().manual_seed(seed)
    prior = PriorNet(channels or corpus.shape[1], base, rank, lora_scale, generator=g)
    params = prior.base_parameters()
    state = AdamState.zeros_like(params)
    for step in range(steps):
        idx = torch.randint(len(corpus), (min(batch_size, len(corpus)),), generator=g)
        for p in params:
            p.grad = None
        loss = denoising_loss(prior, corpus[idx], g)
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr)
        if log is not None:
            log(step, float(loss.detach()))
    return prior.freeze()


def prior_sections(prior):
    """Checkpoint sections for the frozen prior weights (``prior/``) and adapters (``lora/``)."""
    out = {}
    for name, p in prior.named_parameters():
        tag = "lora/" if name.rsplit(".", 1)[-1] in ("lora_a", "lora_b") else "prior/"
        out[tag + name] = p.detach()
    return out


def load_prior_sections(prior, sections, include_lora=True):
    named = dict(prior.named_parameters())
    with torch.no_grad():
        for key, value in sections.items():
            tag, _, name = key.partition("/")
            if tag not in ("prior", "lora") or (tag == "lora" and not include_lora):
                continue
            if name not in named or named[name].shape != value.shape:
                raise InputDomainError(f"checkpoint section {key} does not match the prior architecture")
            named[name].copy_(value)
    return prior
