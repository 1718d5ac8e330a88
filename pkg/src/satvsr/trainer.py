"""Charbonnier training with Adam and a single cosine-annealing cycle."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import flowlabel
from .model import SATVSR, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = "iter\tlr\tloss\twall_seconds\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainSpec:
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 2
    total_iters: int = 5000
    eps_charbonnier: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1000
    patch_size: int = 64  # LR crop side

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def charbonnier(sr, gt, eps=1e-3):
    """Mean over elements of sqrt((gt - sr)^2 + eps^2)."""
    if sr.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(gt.shape)}")
    if isinstance(sr, torch.Tensor):
        return torch.sqrt((gt - sr) ** 2 + eps * eps).mean()
    return float(np.mean(np.sqrt((np.asarray(gt) - np.asarray(sr)) ** 2 + eps * eps)))


def lr_schedule(iteration, spec):
    it = min(max(iteration, 0), spec.total_iters)
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + math.cos(math.pi * it / spec.total_iters))


@dataclass
class TrainClip:
    """An LR clip, its HR reference frame and LR-grid flows toward the reference."""
    lr: np.ndarray  # (T, h, w, 3)
    hr_ref: np.ndarray  # (4h, 4w, 3)
    flows: list  # T arrays of (h, w, 2)
    clip_id: str = ""


def make_train_clip(lr_seq, hr_seq, provider="synthetic_known", P=8, clip_id="", flow_dir=None):
    lr = lr_seq.as_array()
    ref = lr_seq.ref_index
    flows = []
    for t in range(lr_seq.T):
        if t == ref:
            flows.append(np.zeros(lr.shape[1:3] + (2,)))
            continue
        known = lr_seq.flows[t] if (provider == "synthetic_known" and lr_seq.flows is not None) else None
        if provider == "synthetic_known" and known is None:
            raise ValueError(f"clip {clip_id!r} carries no known flow")
        path = Path(flow_dir) / f"flow{t + 1}.flo" if flow_dir is not None else None
        fl = flowlabel.estimate_flow(lr[ref], lr[t], provider, block=P, known=known, path=path)
        flows.append(fl.displacement)
    return TrainClip(lr, hr_seq.frames[hr_seq.ref_index], flows, clip_id)


def crop_labels(flows, y, x, size, P):
    cropped = [f[y:y + size, x:x + size] for f in flows]
    grid = flowlabel.build_labels(cropped, P, P, size, size, len(flows) // 2)
    return grid.labels


def sample_batch(clips, spec, iteration, P, scale=4):
    """Batch for ``iteration``; a pure function of (clips, seed, iteration)."""
    rng = np.random.default_rng([spec.seed, iteration])
    lrs, hrs, labels = [], [], []
    for _ in range(spec.batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        h, w = clip.lr.shape[1:3]
        size = min(spec.patch_size, h, w)
        size -= size % P
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        lrs.append(clip.lr[:, y:y + size, x:x + size])
        hrs.append(clip.hr_ref[y * scale:(y + size) * scale, x * scale:(x + size) * scale])
        labels.append(crop_labels(clip.flows, y, x, size, P))
    lr_t = torch.from_numpy(np.stack(lrs)).permute(0, 1, 4, 2, 3)
    hr_t = torch.from_numpy(np.stack(hrs)).permute(0, 3, 1, 2)
    return lr_t, hr_t, torch.from_numpy(np.stack(labels))


def make_optimizer(model, spec):
    return torch.optim.Adam(model.parameters(), lr=spec.lr_max, betas=(spec.beta1, spec.beta2))


def train(model, clips, spec, out_dir=None, start_iter=0, optimizer=None, stop_iter=None):
    """Run iterations ``start_iter .. stop_iter-1`` and return the loss log rows.

    Each row is ``(iteration, lr, loss, wall_seconds)``; the loss is measured
    before that iteration's update. With ``out_dir`` set, rows are appended to
    ``loss_log.tsv`` and checkpoints written every ``checkpoint_every`` steps.
    """
    stop_iter = spec.total_iters if stop_iter is None else min(stop_iter, spec.total_iters)
    dtype = next(model.parameters()).dtype
    opt = optimizer or make_optimizer(model, spec)
    P = model.config.P
    use_labels = model.config.attention_mode == "sat"
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.tsv"
        if start_iter == 0 or not log_path.exists():
            log_path.write_text(LOG_HEADER)
    rows = []
    t0 = time.perf_counter()
    model.train()
    for it in range(start_iter, stop_iter):
        lr_now = lr_schedule(it, spec)
        for g in opt.param_groups:
            g["lr"] = lr_now
        lr_t, hr_t, labels = sample_batch(clips, spec, it, P, model.config.scale)
        sr = model(lr_t.to(dtype), labels if use_labels else None)
        loss = charbonnier(sr, hr_t.to(dtype), spec.eps_charbonnier)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(it, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = (it, lr_now, value, time.perf_counter() - t0)
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{row[0]}\t{row[1]!r}\t{row[2]!r}\t{row[3]:.3f}\n")
            done = it + 1
            if done % spec.checkpoint_every == 0 or done == stop_iter:
                save_checkpoint(out_dir / f"ckpt_{done:07d}.npz", model, done, opt)
                save_checkpoint(out_dir / "latest.npz", model, done, opt)
                log.info("iter %d loss %.6f lr %.3e", done, value, lr_now)
    return rows


def resume(path, clips, spec, out_dir=None, stop_iter=None):
    """Continue training from a checkpoint; returns ``(model, rows)``."""
    model, it, opt = load_checkpoint(path, lambda m: make_optimizer(m, spec))
    rows = train(model, clips, spec, out_dir, start_iter=it, optimizer=opt, stop_iter=stop_iter)
    return model, rows


def read_loss_log(path):
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        it, lr, loss, wall = line.split("\t")
        rows.append((int(it), float(lr), float(loss), float(wall)))
    return rows


def build_model(config, seed=0):
    torch.manual_seed(seed)
    return SATVSR(config)
