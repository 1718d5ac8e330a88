"""Reconstruction head, the assembled network, and checkpoint I/O.

Checkpoint format (``.npz`` archive, one array per entry, row-major):

* ``param/<name>``   model parameter tensors, native dtype
* ``optim/<name>/exp_avg``, ``optim/<name>/exp_avg_sq``  Adam moments (optional)
* ``optim/step``     int64 scalar Adam step counter (optional)
* ``config``         UTF-8 JSON of :class:`ModelConfig`, stored as a uint8 array
* ``iteration``      int64 scalar
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .csna import CrossScaleAggregation
from .posenc import PatchPositionalEncoding
from .satcore import FeatureExtractor, PatchAttention, QKVProjection


@dataclass
class ModelConfig:
    N: int = 3
    C: int = 64
    B: int = 5
    P: int = 8
    s: int = 8
    d: int = 48
    scale: int = 4
    attention_mode: str = "sat"
    csna_enabled: bool = True
    pyramid_levels: int = 3
    learnable_pe: bool = False
    lr_size: int = 64  # LR grid the learnable PE bias is sized for

    def __post_init__(self):
        if self.scale != 4:
            raise ValueError("only 4x reconstruction is supported")
        if self.s != self.P:
            raise ValueError("stride s must equal patch size P")
        if self.d % 6:
            raise ValueError(f"d={self.d} must be divisible by 6")
        if self.attention_mode not in ("sat", "global"):
            raise ValueError(f"attention_mode must be 'sat' or 'global', got {self.attention_mode!r}")
        if self.C < 1 or self.B < 0 or self.P < 1 or self.N < 0:
            raise ValueError("C, P must be positive; B, N non-negative")

    @property
    def T(self):
        return 2 * self.N + 1

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def pixel_shuffle(x, r):
    """Depth-to-space: ``(B, C*r*r, H, W)`` -> ``(B, C, H*r, W*r)``."""
    b, c, h, w = x.shape
    oc = c // (r * r)
    x = x.view(b, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, oc, h * r, w * r)


def bicubic_up(frames, scale=4):
    """Bicubic upsampling of ``(B, 3, H, W)``; unclamped."""
    return F.interpolate(frames, scale_factor=scale, mode="bicubic", align_corners=False)


class Reconstructor(nn.Module):
    """Two (conv -> 2x depth-to-space) stages, a conv to RGB, plus a bicubic skip."""

    def __init__(self, channels=64):
        super().__init__()
        self.up1 = nn.Conv2d(channels, 4 * channels, 3, 1, 1)
        self.up2 = nn.Conv2d(channels, 4 * channels, 3, 1, 1)
        self.conv_last = nn.Conv2d(channels, 3, 3, 1, 1)
        nn.init.zeros_(self.conv_last.weight)
        nn.init.zeros_(self.conv_last.bias)

    def forward(self, feat, lr_ref):
        x = F.leaky_relu(pixel_shuffle(self.up1(feat), 2), 0.1)
        x = F.leaky_relu(pixel_shuffle(self.up2(x), 2), 0.1)
        return self.conv_last(x) + bicubic_up(lr_ref, 4)


def upsample_reconstruct(head, features, lr_ref):
    return head(features, lr_ref)


class SATVSR(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.extractor = FeatureExtractor(cfg.C, cfg.B)
        grid = (cfg.T, cfg.lr_size // cfg.P, cfg.lr_size // cfg.P) if cfg.learnable_pe else None
        self.pos = PatchPositionalEncoding(cfg.d, cfg.C, cfg.P, learnable_grid=grid)
        self.qkv = QKVProjection(cfg.C)
        self.attn = PatchAttention(cfg.C, cfg.P, cfg.attention_mode)
        self.head = Reconstructor(cfg.C)
        # built last so every variant shares the same initial weights elsewhere
        self.csna = CrossScaleAggregation(cfg.C, cfg.P, cfg.pyramid_levels) if cfg.csna_enabled else None

    def forward(self, lr, labels=None):
        """lr: ``(B, T, 3, H, W)``; labels: ``(B, N, T)`` long (sat mode). Returns ``(B, 3, 4H, 4W)``."""
        b, t, _, h, w = lr.shape
        if t != self.config.T:
            raise ValueError(f"expected {self.config.T} frames, got {t}")
        feat = self.pos(self.extractor(lr))
        q, k, v = self.qkv(feat)
        m = self.attn(q, k, v, labels)
        if self.csna is not None:
            m = self.csna(m)
        return self.head(m, lr[:, t // 2])

    def describe(self):
        groups = {}
        for name, p in self.named_parameters():
            groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + p.numel()
        return {"config": json.loads(self.config.to_json()), "parameters": sum(groups.values()),
                "groups": groups}


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model, iteration=0, optimizer=None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        step = 0
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
                arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
                step = int(st["step"])
        arrays["optim/step"] = np.array(step, dtype=np.int64)
    arrays["config"] = np.frombuffer(model.config.to_json().encode(), dtype=np.uint8)
    arrays["iteration"] = np.array(iteration, dtype=np.int64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, optimizer_factory=None):
    """Return ``(model, iteration, optimizer_or_None)``."""
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    cfg = ModelConfig.from_dict(json.loads(data["config"].tobytes().decode()))
    model = SATVSR(cfg)
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in data.items() if k.startswith("param/")}
    model.load_state_dict(state)
    opt = None
    if optimizer_factory is not None:
        opt = optimizer_factory(model)
        if "optim/step" in data:
            step = torch.tensor(float(data["optim/step"]))
            for n, p in model.named_parameters():
                key = f"optim/{n}/exp_avg"
                if key in data:
                    opt.state[p] = {
                        "step": step.clone(),
                        "exp_avg": torch.from_numpy(data[key].copy()),
                        "exp_avg_sq": torch.from_numpy(data[f"optim/{n}/exp_avg_sq"].copy()),
                    }
    return model, int(data["iteration"]), opt
