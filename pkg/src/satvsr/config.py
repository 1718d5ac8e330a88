"""Flat ``key = value`` run configuration shared by every CLI command.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
command-line flags. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainSpec
from .videodata import DegradationSpec

FLOW_PROVIDERS = ("block_matching", "external_import")


def _defaults():
    out = {}
    for cls in (ModelConfig, TrainSpec):
        for f in fields(cls):
            out[f.name] = f.default
    out["total_iters"] = 5000
    out["sigma"] = DegradationSpec.sigma
    out["kernel_size"] = DegradationSpec.kernel_size
    out["flow_provider"] = "block_matching"
    return out


DEFAULTS = _defaults()

HELP = {
    "N": "temporal radius; clips hold 2N+1 frames",
    "C": "feature channels",
    "B": "residual blocks in the feature extractor",
    "P": "patch size in LR pixels",
    "s": "patch stride (must equal P)",
    "d": "positional-encoding width (multiple of 6)",
    "scale": "upscaling factor (4 only)",
    "attention_mode": "sat or global",
    "csna_enabled": "cross-scale aggregation on/off",
    "pyramid_levels": "pooled levels searched by cross-scale aggregation",
    "learnable_pe": "add a trainable zero-initialised PE bias",
    "lr_size": "LR grid side the learnable PE bias is sized for",
    "lr_max": "initial learning rate",
    "lr_min": "final learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "batch_size": "clips per step",
    "total_iters": "training iterations (full-scale runs use 400000)",
    "eps_charbonnier": "Charbonnier epsilon",
    "seed": "seed for sampling, fusion and initialisation",
    "checkpoint_every": "iterations between checkpoints",
    "patch_size": "LR training crop side",
    "sigma": "Gaussian degradation std-dev (HR pixels)",
    "kernel_size": "Gaussian kernel taps (odd)",
    "flow_provider": "block_matching or external_import",
}


class ConfigKeyError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


def coerce(key, raw):
    if key not in DEFAULTS:
        raise ConfigKeyError(key, "unknown key")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigKeyError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def read_config_file(path):
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        values[key] = coerce(key, val.strip())
    return values


def resolve(file_path=None, overrides=None):
    cfg = dict(DEFAULTS)
    if file_path is not None:
        cfg.update(read_config_file(file_path))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    if cfg["flow_provider"] not in FLOW_PROVIDERS:
        raise ConfigKeyError("flow_provider", f"must be one of {FLOW_PROVIDERS}")
    return cfg


def _pick(cls, cfg):
    return {f.name: cfg[f.name] for f in fields(cls)}


def model_config(cfg):
    try:
        return ModelConfig(**_pick(ModelConfig, cfg))
    except ValueError as err:
        raise ConfigKeyError("model", str(err)) from None


def train_spec(cfg):
    try:
        return TrainSpec(**_pick(TrainSpec, cfg))
    except ValueError as err:
        raise ConfigKeyError("train", str(err)) from None


def degradation(cfg):
    try:
        return DegradationSpec(cfg["sigma"], cfg["scale"], cfg["kernel_size"])
    except ValueError as err:
        raise ConfigKeyError("kernel_size", str(err)) from None


def dump(cfg):
    return "".join(f"{k} = {cfg[k]}\n" for k in DEFAULTS)
