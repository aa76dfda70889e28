"""Alternating fit/refine driver and the ablation modes."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .decoder import FieldDecoder
from .errors import InputDomainError
from .fitting import FitConfig, RayBank, fit_scene
from .metrics import evaluate
from .planes import PlaneSet, init_planes
from .prior import (FixedLatent, PlaneDecoder, PriorNet, PriorStack, infer_planes,
                    load_prior_sections, prior_sections, refine_scene)

log = logging.getLogger(__name__)

MODES = ("refinedfields", "kplanes-ss", "no-prior", "no-finetuning")


def derive_seed(master, name):
    """Independent 63-bit seed for consumer ``name`` from the master seed."""
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generator_for(master, name):
    return torch.Generator().manual_seed(derive_seed(master, name))


@dataclass
class SceneConfig:
    resolution: int = 512
    channels: int = 32
    init_scale: float = 1.0
    hidden: int = 64
    n_hidden: int = 2
    feat_dim: int = 15
    pe_order: int = 4
    appearance: bool = False
    appearance_dim: int = 32


@dataclass
class RefineConfig:
    n2_steps: int = 3000
    lr_lora: float = 1e-4
    lr_decoder: float = 1e-4
    reduction: str = "sum"
    latent_res: int = 64
    latent_channels: int = 4
    decoder_width: int = 64


@dataclass
class TrainPlan:
    n_epochs: int = 200
    mode: str = "refinedfields"
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval_samples: int = 48
    eval_every: int = 1
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputDomainError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_epochs < 1:
            raise InputDomainError("n_epochs must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        fit = d.pop("fit", {})
        if "betas" in fit:
            fit["betas"] = tuple(fit["betas"])
        return cls(fit=FitConfig(**fit), scene=SceneConfig(**d.pop("scene", {})),
                   refine=RefineConfig(**d.pop("refine", {})), **d)


@dataclass
class RunState:
    epoch: int
    planes: PlaneSet
    decoder: FieldDecoder
    stack: PriorStack = None
    history: list = field(default_factory=list)

    @property
    def latent(self):
        return None if self.stack is None else self.stack.latent


@dataclass
class RunResult:
    state: RunState
    history: list
    checkpoints: list
    manifest: Path = None

    @property
    def final_checkpoint(self):
        return self.checkpoints[-1] if self.checkpoints else None


def ablation_mode_apply(mode, stack, seed=0):
    """Configure ``stack`` for an ablation mode and return it.

    ``no-finetuning`` freezes the adapters at zero update; ``no-prior`` swaps
    in a freshly initialised, frozen prior of the same architecture.
    """
    if mode not in MODES:
        raise InputDomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    if stack is None:
        return None
    if mode == "no-finetuning":
        stack.train_lora = False
        for p in stack.prior.lora_parameters():
            p.requires_grad_(False)
    elif mode == "no-prior":
        arch = stack.prior.arch
        fresh = PriorNet(arch["channels"], arch["base"], arch["rank"], arch["lora_scale"],
                         generator=generator_for(seed, "prior-init"))
        stack.prior = fresh.freeze()
        stack.train_lora = True
    else:
        stack.train_lora = True
    return stack


def build_stack(plan, prior, aabb):
    """Fixed latent, plane decoder and a private copy of ``prior`` configured for ``plan.mode``."""
    if plan.mode == "kplanes-ss":
        return None
    rc, sc = plan.refine, plan.scene
    if prior is None:
        if plan.mode != "no-prior":
            raise InputDomainError(f"mode {plan.mode!r} needs a pretrained prior")
        prior = PriorNet(rc.latent_channels, generator=generator_for(plan.seed, "prior-init")).freeze()
    else:
        prior = copy.deepcopy(prior)
    if prior.channels != rc.latent_channels:
        raise InputDomainError(f"prior works on {prior.channels} latent channels, plan asks for {rc.latent_channels}")
    latent = FixedLatent.sample(rc.latent_channels, rc.latent_res, derive_seed(plan.seed, "latent"))
    decoder = PlaneDecoder(rc.latent_channels, rc.latent_res, sc.resolution, sc.channels, rc.decoder_width,
                           generator=generator_for(plan.seed, "plane-decoder"))
    return ablation_mode_apply(plan.mode, PriorStack(prior, decoder, latent), plan.seed)


def state_sections(state):
    s = {"planes": state.planes.grids, "aabb": state.planes.aabb}
    for name, p in state.decoder.named_parameters():
        tag = "appearance" if name == "appearance" else f"decoder/{name}"
        s[tag] = p.detach()
    if state.stack is not None:
        s.update(prior_sections(state.stack.prior))
        for name, p in state.stack.decoder.named_parameters():
            s[f"plane_decoder/{name}"] = p.detach()
        s["latent"] = state.stack.latent.x
    return s


def restore_state(plan, sections, meta):
    """Rebuild a :class:`RunState` from checkpoint sections written by :func:`run`."""
    planes = PlaneSet(sections["planes"].clone(), sections["aabb"].double())
    decoder = FieldDecoder(**meta["decoder"])
    named = dict(decoder.named_parameters())
    with torch.no_grad():
        for name, p in named.items():
            key = "appearance" if name == "appearance" else f"decoder/{name}"
            p.copy_(sections[key])
    stack = None
    if any(k.startswith("plane_decoder/") for k in sections):
        arch = meta["prior_arch"]
        pn = PriorNet(arch["channels"], arch["base"], arch["rank"], arch["lora_scale"]).freeze()
        load_prior_sections(pn, sections)
        rc = plan.refine
        pd = PlaneDecoder(rc.latent_channels, rc.latent_res, plan.scene.resolution, plan.scene.channels,
                          rc.decoder_width)
        pd.load_state_dict({k.split("/", 1)[1]: v for k, v in sections.items() if k.startswith("plane_decoder/")})
        latent = FixedLatent(sections["latent"].clone(), meta["latent_seed"])
        stack = PriorStack(pn, pd, latent, train_lora=plan.mode != "no-finetuning")
        if not stack.train_lora:
            for p in pn.lora_parameters():
                p.requires_grad_(False)
    return RunState(meta["epoch"], planes, decoder, stack, list(meta.get("history", [])))


def _write_trace(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _epoch_path(out_dir, epoch):
    return Path(out_dir) / f"epoch_{epoch:04d}.ckpt"


def run(plan, dataset, prior=None, out_dir=None, callback=None, resume=False, extra_meta=None):
    """Alternate scene fitting and refining for ``plan.n_epochs`` epochs.

    Every epoch fits for ``n1_steps``; every epoch but the last then refines for
    ``n2_steps`` and replaces the planes with the refined inference, so the
    final planes are the post-fitting ones. ``callback(event, state)`` is called
    with ``"reassigned"`` right after each replacement and ``"epoch"`` at each
    epoch boundary.
    """
    sc, fc = plan.scene, plan.fit
    n_train = len(dataset.indices("train"))
    if n_train == 0:
        raise InputDomainError("dataset has no training images")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    decoder_conf = dict(channels=sc.channels, hidden=sc.hidden, n_hidden=sc.n_hidden, feat_dim=sc.feat_dim,
                        pe_order=sc.pe_order, n_images=n_train if sc.appearance else 0,
                        appearance_dim=sc.appearance_dim)
    checkpoints = []
    start = 0
    state = None
    if resume and out is not None:
        found = sorted(out.glob("epoch_*.ckpt"))
        if found:
            sections, meta = ckpt.load_checkpoint(found[-1])
            state = restore_state(plan, sections, meta)
            start = state.epoch + 1
            checkpoints = [str(p) for p in found]
            log.info("resuming after epoch %d from %s", state.epoch, found[-1])
    if state is None:
        planes = init_planes(sc.resolution, sc.channels, dataset.aabb, generator_for(plan.seed, "planes"),
                             scale=sc.init_scale)
        decoder = FieldDecoder(**decoder_conf, generator=generator_for(plan.seed, "mlp"))
        state = RunState(-1, planes, decoder, build_stack(plan, prior, dataset.aabb))
    bank = RayBank.from_dataset(dataset, "train")
    has_test = bool(dataset.indices("test"))
    meta_base = {
        "plan": plan.to_dict(),
        "decoder": decoder_conf,
        "prior_arch": None if state.stack is None else state.stack.prior.arch,
        "latent_seed": None if state.stack is None else state.stack.latent.seed,
        **(extra_meta or {}),
    }
    for epoch in range(start, plan.n_epochs):
        state.epoch = epoch
        rec = {"epoch": epoch}
        planes, ftrace = fit_scene(state.planes, state.decoder, bank, fc, dataset.near, dataset.far,
                                   generator_for(plan.seed, f"fit-{epoch}"), dataset.background)
        state.planes = planes
        tail = max(1, len(ftrace.loss) // 10)
        rec["fit_steps"] = len(ftrace.loss)
        if ftrace.loss:
            rec["fit_loss_first"] = float(np.mean(ftrace.loss[:10]))
            rec["fit_loss_last"] = float(np.mean(ftrace.loss[-tail:]))
            rec["train_psnr"] = float(np.mean(ftrace.psnr[-tail:]))
        if has_test and ((epoch + 1) % plan.eval_every == 0 or epoch == plan.n_epochs - 1):
            report = evaluate(state.planes, state.decoder, dataset, "test", plan.eval_samples,
                              seed=derive_seed(plan.seed, f"eval-{epoch}"))
            rec["test_psnr"] = report.mean_psnr
            rec["test_ssim"] = report.mean_ssim
        rec["planes_fit_digest"] = state.planes.digest()
        rec["refine_steps"] = 0
        if state.stack is not None and epoch < plan.n_epochs - 1:
            rc = plan.refine
            refined, rtrace = refine_scene(state.stack, state.planes, rc.n2_steps, rc.lr_lora,
                                           rc.lr_decoder, rc.reduction)
            state.planes = refined
            rec["refine_steps"] = len(rtrace.loss)
            rec["refine_loss_initial"] = rtrace.initial_loss
            rec["refine_loss_final"] = rtrace.final_loss
            if out is not None:
                _write_trace(out / f"refine_trace_{epoch:04d}.csv", ["step", "loss"], enumerate(rtrace.loss))
            if callback is not None:
                callback("reassigned", state)
        if state.stack is not None:
            rec["latent_digest"] = state.stack.latent.digest()
            rec["prior_digest"] = state.stack.prior.base_digest()
        rec["planes_digest"] = state.planes.digest()
        state.history.append(rec)
        log.info("epoch %d: %s", epoch, {k: v for k, v in rec.items() if not k.endswith("digest")})
        if out is not None:
            _write_trace(out / f"fit_trace_{epoch:04d}.csv", ["step", "loss", "psnr", "lr"], ftrace.rows())
            last = epoch == plan.n_epochs - 1
            if last or (epoch + 1) % plan.checkpoint_every == 0:
                path = _epoch_path(out, epoch)
                ckpt.save_checkpoint(path, state_sections(state),
                                     {**meta_base, "epoch": epoch, "history": state.history})
                checkpoints.append(str(path))
        if callback is not None:
            callback("epoch", state)
    manifest = None
    if out is not None:
        final = out / "final.ckpt"
        ckpt.save_checkpoint(final, state_sections(state),
                             {**meta_base, "epoch": state.epoch, "history": state.history})
        checkpoints.append(str(final))
        manifest = out / "run.json"
        manifest.write_text(json.dumps({
            **meta_base,
            "seeds": {name: derive_seed(plan.seed, name) for name in ("planes", "mlp", "latent", "plane-decoder")},
            "checkpoints": checkpoints,
            "history": state.history,
        }, indent=2, sort_keys=True))
    return RunResult(state, state.history, checkpoints, manifest)
