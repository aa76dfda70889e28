"""Plane-factored radiance fields fitted from posed images, with prior-based plane refining."""

from .alternating import MODES, RunState, TrainPlan, ablation_mode_apply, run
from .decoder import FieldDecoder, positional_encoding
from .errors import (ConfigError, CorruptionError, FormatError, InputDomainError, NumericDomainError,
                     PlaneFieldError)
from .fitting import FitConfig, adam_step, fit_scene, fitting_loss, warmup_cosine_lr
from .geometry import Camera, Rays, RaySamples, generate_rays, sample_along_ray, sample_along_rays
from .planes import PLANES, PlaneSet, init_planes
from .prior import PlaneDecoder, PriorNet, PriorStack, infer_planes, refine_scene, refining_loss
from .rendering import composite, render_image, render_pixel

__version__ = "0.1.0"
