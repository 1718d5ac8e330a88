"""Y-channel PSNR/SSIM, benchmark runs and report emission."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .flowlabel import build_labels
from .model import bicubic_up
from .trainer import make_train_clip
from .videodata import gaussian_kernel1d, rgb_to_y

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


def _check_pair(sr, gt):
    sr, gt = np.asarray(sr, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if sr.shape != gt.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {gt.shape}")
    return np.clip(sr, 0.0, 1.0), np.clip(gt, 0.0, 1.0)


def psnr_y(sr, gt):
    sr, gt = _check_pair(sr, gt)
    mse = np.mean((rgb_to_y(sr) - rgb_to_y(gt)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim_plane(a, b):
    """Single-scale SSIM of two 2-D planes in [0, 1] over valid window positions."""
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"plane {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    win = np.outer(*(2 * [gaussian_kernel1d(SSIM_SIGMA, SSIM_WIN)]))

    def filt(x):
        return convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_y(sr, gt):
    sr, gt = np.asarray(sr, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if sr.shape != gt.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {gt.shape}")
    return ssim_plane(rgb_to_y(sr), rgb_to_y(gt))


@dataclass
class MetricsReport:
    per_clip: list = field(default_factory=list)  # (clip_id, psnr, ssim)
    meta: dict = field(default_factory=dict)

    @property
    def psnr(self):
        return float(np.mean([r[1] for r in self.per_clip])) if self.per_clip else float("nan")

    @property
    def ssim(self):
        return float(np.mean([r[2] for r in self.per_clip])) if self.per_clip else float("nan")

    def to_dict(self):
        return {
            "per_clip": [{"clip_id": c, "psnr": p, "ssim": s} for c, p, s in self.per_clip],
            "aggregate": {"psnr": self.psnr, "ssim": self.ssim},
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls([(r["clip_id"], r["psnr"], r["ssim"]) for r in d["per_clip"]], d["meta"])

    def table(self):
        lines = [f"{'clip':<24} PSNR/SSIM"]
        lines += [f"{c:<24} {p:.2f}/{s:.4f}" for c, p, s in self.per_clip]
        lines.append(f"{'mean':<24} {self.psnr:.2f}/{self.ssim:.4f}")
        return "\n".join(lines)

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json() + "\n")
        (out_dir / f"{stem}.txt").write_text(self.table() + "\n")


def bicubic_predict(lr_seq, **_):
    ref = torch.from_numpy(lr_seq.frames[lr_seq.ref_index]).permute(2, 0, 1)[None]
    return bicubic_up(ref, 4)[0].permute(1, 2, 0).clamp(0, 1).numpy()


class ModelPredictor:
    """Callable mapping an LR FrameSequence to its clamped SR reference frame."""

    def __init__(self, model, provider="block_matching"):
        self.model = model.eval()
        self.provider = provider

    @torch.no_grad()
    def __call__(self, lr_seq, flow_dir=None):
        cfg = self.model.config
        dtype = next(self.model.parameters()).dtype
        lr = torch.from_numpy(lr_seq.as_array()).permute(0, 3, 1, 2)[None].to(dtype)
        labels = None
        if cfg.attention_mode == "sat":
            provider = self.provider
            if provider == "synthetic_known" and lr_seq.flows is None:
                provider = "block_matching"
            clip = make_train_clip(lr_seq, lr_seq, provider, cfg.P, flow_dir=flow_dir)
            h, w = lr_seq.shape
            grid = build_labels(clip.flows, cfg.P, cfg.P, h, w, lr_seq.ref_index)
            labels = torch.from_numpy(grid.labels)[None]
        sr = self.model(lr, labels)
        return sr[0].permute(1, 2, 0).clamp(0, 1).double().numpy()


def run_benchmark(predict, clips, meta=None):
    """Evaluate ``predict`` on ``clips``: iterable of ``(clip_id, lr_seq, hr_seq_or_None[, flow_dir])``."""
    report = MetricsReport(meta=dict(meta or {}))
    for entry in clips:
        clip_id, lr_seq, hr_seq = entry[:3]
        flow_dir = entry[3] if len(entry) > 3 else None
        if hr_seq is None:
            log.warning("clip %s has no HR ground truth; skipped", clip_id)
            continue
        sr = predict(lr_seq, flow_dir=flow_dir)
        gt = hr_seq.frames[hr_seq.ref_index]
        report.per_clip.append((clip_id, psnr_y(sr, gt), ssim_y(sr, gt)))
    return report


def ablation_table(reports):
    """Rows in the layout Model | SAT | CNA | PSNR/SSIM."""
    marks = {"Base": ("", ""), "Base+SAT": ("√", ""), "Base+SAT+CNA": ("√", "√")}
    lines = [f"{'Model':<14}{'SAT':<5}{'CNA':<5}PSNR/SSIM"]
    for name, rep in reports.items():
        sat, cna = marks.get(name, ("?", "?"))
        lines.append(f"{name:<14}{sat:<5}{cna:<5}{rep.psnr:.2f}/{rep.ssim:.4f}")
    return "\n".join(lines)
