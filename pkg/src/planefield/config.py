"""INI run configuration with environment and command-line overrides.

Precedence, lowest first: built-in defaults, the config file, environment
variables ``PLANEFIELD_<SECTION>_<KEY>``, then ``section.key=value`` overrides.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass

from .alternating import MODES, RefineConfig, SceneConfig, TrainPlan
from .errors import ConfigError
from .fitting import FitConfig

ENV_PREFIX = "PLANEFIELD_"

DEFAULTS = {
    "scene": {
        "resolution": 512,
        "channels": 32,
        "init_scale": 1.0,
        "hidden": 64,
        "n_hidden": 2,
        "feat_dim": 15,
        "pe_order": 4,
        "appearance": False,
        "appearance_dim": 32,
    },
    "fitting": {
        "n1_steps": 30000,
        "batch_size": 4096,
        "lr_planes": 0.01,
        "lr_mlp": 0.01,
        "lr_appearance": 0.01,
        "lambda_tv": 1e-4,
        "warmup_steps": 512,
        "n_samples": 48,
        "stratified": True,
    },
    "refining": {
        "n2_steps": 3000,
        "lr_lora": 1e-4,
        "lr_decoder": 1e-4,
        "reduction": "sum",
        "latent_res": 64,
        "latent_channels": 4,
        "decoder_width": 64,
    },
    "prior": {
        "base": 32,
        "rank": 4,
        "lora_scale": 1.0,
        "pretrain_steps": 2000,
        "pretrain_lr": 1e-3,
        "batch_size": 16,
        "corpus_size": 512,
        "seed": 0,
        "checkpoint": "",
    },
    "run": {
        "n_epochs": 200,
        "mode": "refinedfields",
        "seed": 0,
        "checkpoint_every": 1,
        "eval_every": 1,
    },
    "eval": {
        "n_samples": 48,
        "appearance_epochs": 10,
        "appearance_batch": 512,
        "appearance_lr": 0.1,
    },
}

_CHOICES = {("run", "mode"): MODES, ("refining", "reduction"): ("sum", "mean")}
_POSITIVE = {
    ("scene", "resolution"), ("scene", "channels"), ("scene", "hidden"), ("fitting", "batch_size"),
    ("fitting", "n_samples"), ("fitting", "lr_planes"), ("fitting", "lr_mlp"), ("fitting", "lr_appearance"),
    ("refining", "lr_lora"), ("refining", "lr_decoder"), ("refining", "latent_res"),
    ("refining", "latent_channels"), ("run", "n_epochs"), ("eval", "n_samples"), ("prior", "rank"),
    ("prior", "base"), ("prior", "corpus_size"), ("run", "checkpoint_every"), ("run", "eval_every"),
}


def _coerce(key, default, raw, origin=""):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        where = f" ({origin})" if origin else ""
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}{where}") from None
    return text


@dataclass
class RunConfig:
    values: dict

    def get(self, section, key):
        return self.values[section][key]

    def section(self, name):
        return dict(self.values[name])

    def to_ini(self):
        cp = configparser.ConfigParser()
        for sec, items in self.values.items():
            cp[sec] = {k: str(v) for k, v in items.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def plan(self):
        v = self.values
        return TrainPlan(
            n_epochs=v["run"]["n_epochs"], mode=v["run"]["mode"], seed=v["run"]["seed"],
            fit=FitConfig(**v["fitting"]), scene=SceneConfig(**v["scene"]),
            refine=RefineConfig(**v["refining"]), eval_samples=v["eval"]["n_samples"],
            eval_every=v["run"]["eval_every"], checkpoint_every=v["run"]["checkpoint_every"],
        )


def _apply(values, section, key, raw, origin):
    name = f"{section}.{key}"
    if section not in DEFAULTS:
        raise ConfigError(name, f"unknown section [{section}] ({origin})")
    if key not in DEFAULTS[section]:
        raise ConfigError(name, f"unknown key ({origin})")
    values[section][key] = _coerce(name, DEFAULTS[section][key], raw, origin)


def _validate(values):
    for (sec, key), allowed in _CHOICES.items():
        if values[sec][key] not in allowed:
            raise ConfigError(f"{sec}.{key}", f"must be one of {allowed}, got {values[sec][key]!r}")
    for sec, key in _POSITIVE:
        if not values[sec][key] > 0:
            raise ConfigError(f"{sec}.{key}", "must be positive")
    for sec, key in (("fitting", "n1_steps"), ("refining", "n2_steps"), ("fitting", "lambda_tv"),
                     ("fitting", "warmup_steps"), ("prior", "pretrain_steps")):
        if values[sec][key] < 0:
            raise ConfigError(f"{sec}.{key}", "must be nonnegative")
    if values["refining"]["latent_res"] % 4:
        raise ConfigError("refining.latent_res", "must be divisible by 4")
    if values["scene"]["resolution"] < 2:
        raise ConfigError("scene.resolution", "must be at least 2")


def load_config(path=None, overrides=(), environ=None, text=None):
    """Resolve a :class:`RunConfig` from defaults, file, environment and overrides.

    ``text`` takes INI content directly in place of ``path`` (e.g. a config
    recorded in a run manifest).
    """
    values = {sec: dict(items) for sec, items in DEFAULTS.items()}
    if path is not None or text is not None:
        origin = str(path) if path is not None else "<text>"
        cp = configparser.ConfigParser()
        try:
            if path is not None:
                with open(path) as fh:
                    cp.read_file(fh)
            else:
                cp.read_string(text)
        except FileNotFoundError:
            raise ConfigError(origin, "config file not found") from None
        except configparser.Error as exc:
            raise ConfigError(origin, f"malformed config ({exc.__class__.__name__})") from None
        for sec in cp.sections():
            for key, raw in cp[sec].items():
                _apply(values, sec, key, raw, origin)
    env = os.environ if environ is None else environ
    for sec, items in DEFAULTS.items():
        for key in items:
            var = f"{ENV_PREFIX}{sec.upper()}_{key.upper()}"
            if var in env:
                _apply(values, sec, key, env[var], var)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        _apply(values, sec, key, raw, "command line")
    _validate(values)
    return RunConfig(values)
