"""Clip synthesis, Gaussian degradation, cross-scene fusion and patch sampling.

Frames are float64 arrays of shape (H, W, 3) with values in [0, 1].
Clips on disk follow the Vimeo-90K septuplet layout ``<root>/<clip_id>/im1.png``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

HR = "HR"
LR = "LR"


class ConfigError(ValueError):
    pass


@dataclass
class FrameSequence:
    frames: list
    role: str = HR
    scene_boundary: Optional[int] = None
    flows: Optional[list] = None  # per-frame H×W×2 flow toward the reference, when known

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a FrameSequence needs at least one frame")
        self.frames = [np.asarray(f, dtype=np.float64) for f in self.frames]
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[2] != 3:
            raise ValueError(f"frames must be H×W×3, got {shape}")
        for f in self.frames:
            if f.shape != shape:
                raise ValueError(f"frame shapes differ: {f.shape} vs {shape}")
            if f.min() < 0.0 or f.max() > 1.0:
                raise ValueError("frame samples must lie in [0, 1]")
        if self.role not in (HR, LR):
            raise ValueError(f"role must be HR or LR, got {self.role!r}")
        if self.scene_boundary is not None and not 1 <= self.scene_boundary <= self.T - 1:
            raise ValueError(f"scene_boundary {self.scene_boundary} outside [1, {self.T - 1}]")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape[:2]

    @property
    def ref_index(self) -> int:
        return self.T // 2

    def as_array(self) -> np.ndarray:
        return np.stack(self.frames)


@dataclass(frozen=True)
class DegradationSpec:
    sigma: float = 1.6
    scale: int = 4
    kernel_size: int = 13

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass(frozen=True)
class FusionSpec:
    seed: int
    partner_index: int
    splice_index: int


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    if size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd, got {size}")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_kernel2d(sigma: float, size: int) -> np.ndarray:
    k = gaussian_kernel1d(sigma, size)
    return np.outer(k, k)


def gaussian_blur(frame: np.ndarray, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    """Separable Gaussian blur with unit-sum kernel and reflect padding.

    Reflect here is the half-sample symmetric mode (edge pixel repeated),
    which keeps constant images exactly constant.
    """
    k = gaussian_kernel1d(spec.sigma, spec.kernel_size)
    out = ndimage.correlate1d(np.asarray(frame, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def downsample(frame: np.ndarray, scale: int) -> np.ndarray:
    h, w = frame.shape[:2]
    if h % scale or w % scale:
        raise ValueError(
            f"frame {h}x{w} is not divisible by scale {scale}; "
            f"crop to {h - h % scale}x{w - w % scale} first"
        )
    return np.ascontiguousarray(frame[::scale, ::scale])


def make_lr_sequence(hr: FrameSequence, spec: DegradationSpec = DegradationSpec()) -> FrameSequence:
    if hr.role != HR:
        raise ValueError("make_lr_sequence expects an HR sequence")
    frames = [np.clip(downsample(gaussian_blur(f, spec), spec.scale), 0.0, 1.0) for f in hr.frames]
    flows = None
    if hr.flows is not None:
        flows = [downsample(fl, spec.scale) / spec.scale for fl in hr.flows]
    return FrameSequence(frames, role=LR, scene_boundary=hr.scene_boundary, flows=flows)


def fuse_sequences(a: FrameSequence, b: FrameSequence, k: int) -> FrameSequence:
    """Splice frames [0, k) of ``a`` with frames [k, T) of ``b``."""
    if a.shape != b.shape or a.T != b.T:
        raise ValueError(f"cannot fuse clips of shape {a.shape}x{a.T} and {b.shape}x{b.T}")
    if not 1 <= k <= a.T - 1:
        raise ValueError(f"splice index {k} outside [1, {a.T - 1}]")
    frames = [f.copy() for f in a.frames[:k]] + [f.copy() for f in b.frames[k:]]
    flows = None
    if a.flows is not None and b.flows is not None:
        ref = a.ref_index
        # known flow is only meaningful inside the reference frame's own scene
        src = a if ref < k else b
        flows = []
        for t in range(a.T):
            same_scene = (t < k) == (ref < k)
            flows.append(src.flows[t].copy() if same_scene else np.zeros_like(src.flows[t]))
    return FrameSequence(frames, role=a.role, scene_boundary=k, flows=flows)


def fusion_plan(n_clips: int, T: int = 7, seed: int = 0) -> list:
    """Draw a (partner, splice) pair for every clip in a pool of ``n_clips``.

    Partners may repeat across clips.
    """
    if n_clips < 2:
        raise ValueError("fusion needs at least two clips")
    rng = np.random.default_rng(seed)
    plan = []
    for i in range(n_clips):
        partner = int(rng.integers(0, n_clips - 1))
        if partner >= i:
            partner += 1
        k = int(rng.integers(1, T))
        plan.append(FusionSpec(seed=seed, partner_index=partner, splice_index=k))
    return plan


def rgb_to_y(frame: np.ndarray) -> np.ndarray:
    """BT.601 limited-range luma for RGB values in [0, 1]."""
    frame = np.asarray(frame, dtype=np.float64)
    return (65.481 * frame[..., 0] + 128.553 * frame[..., 1] + 24.966 * frame[..., 2] + 16.0) / 255.0


def sample_patch_pair(hr: FrameSequence, lr: FrameSequence, lr_size: int, seed, scale: int = 4):
    """Co-located random crops: LR (T, s, s, 3) and HR (T, scale*s, scale*s, 3)."""
    lh, lw = lr.shape
    hh, hw = hr.shape
    if (hh, hw) != (lh * scale, lw * scale):
        raise ValueError(f"HR {hh}x{hw} and LR {lh}x{lw} are not aligned at scale {scale}")
    if lr_size > lh or lr_size > lw:
        raise ValueError(f"crop {lr_size} larger than LR frame {lh}x{lw}")
    rng = np.random.default_rng(seed)
    y = int(rng.integers(0, lh - lr_size + 1))
    x = int(rng.integers(0, lw - lr_size + 1))
    lr_crop = lr.as_array()[:, y:y + lr_size, x:x + lr_size]
    hs = lr_size * scale
    hr_crop = hr.as_array()[:, y * scale:y * scale + hs, x * scale:x * scale + hs]
    return lr_crop, hr_crop


# -- synthetic clips ---------------------------------------------------------

def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.random((h, w, 3)), sigma=(3.0, 3.0, 0))
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    fine = ndimage.gaussian_filter(rng.random((h, w, 3)), sigma=(0.8, 0.8, 0))
    img = 0.6 * base + 0.4 * fine
    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        hh, ww = rng.integers(3, max(4, h // 3)), rng.integers(3, max(4, w // 3))
        img[y0:y0 + hh, x0:x0 + ww] = rng.random(3)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    return 0.05 + 0.9 * img


def synthetic_clip(seed: int, size: int = 64, T: int = 7, max_step: int = 3) -> FrameSequence:
    """A textured canvas panned by a seeded integer-pixel trajectory.

    The returned HR clip carries its exact backward flows toward the center
    frame: content at reference pixel x sits at ``x + flow`` in frame t.
    """
    rng = np.random.default_rng(seed)
    margin = max_step * T + 2
    canvas = _texture(rng, size + 2 * margin, size + 2 * margin)
    velocity = rng.integers(-max_step, max_step + 1, size=2)
    jitter = rng.integers(-1, 2, size=(T, 2))
    ref = T // 2
    offsets = np.array([velocity * (t - ref) + jitter[t] for t in range(T)])
    offsets -= offsets[ref]
    offsets = np.clip(offsets, -margin, margin)
    frames, flows = [], []
    for t in range(T):
        dy, dx = offsets[t]
        # frame t shows canvas shifted by -offset, so reference content moves by +(dx, dy)
        y0, x0 = margin - dy, margin - dx
        frames.append(canvas[y0:y0 + size, x0:x0 + size].copy())
        fl = np.zeros((size, size, 2))
        fl[..., 0], fl[..., 1] = dx, dy
        flows.append(fl)
    return FrameSequence(frames, role=HR, flows=flows)


def synthetic_pool(n: int, seed: int = 0, size: int = 64, T: int = 7) -> list:
    return [synthetic_clip(seed * 100003 + i, size=size, T=T) for i in range(n)]


def fused_pool(clips: Sequence[FrameSequence], seed: int = 0):
    plan = fusion_plan(len(clips), clips[0].T, seed)
    fused = [fuse_sequences(clips[i], clips[f.partner_index], f.splice_index) for i, f in enumerate(plan)]
    return fused, plan


# -- disk I/O ----------------------------------------------------------------

def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(frame: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(frame)).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_meta(path, scene_boundary=None, **provenance) -> None:
    lines = [f"scene_boundary\t{'none' if scene_boundary is None else scene_boundary}"]
    lines += [f"{k}\t{v}" for k, v in provenance.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, val = line.partition("\t")
            meta[key] = val
    return meta


def save_clip(seq: FrameSequence, clip_dir, **provenance) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames, start=1):
        save_png(f, clip_dir / f"im{i}.png")
    if seq.scene_boundary is not None or provenance:
        write_meta(clip_dir / "meta.txt", seq.scene_boundary, **provenance)


def load_clip(clip_dir, role: str = HR) -> FrameSequence:
    clip_dir = Path(clip_dir)
    paths = sorted(clip_dir.glob("im*.png"), key=lambda p: int(p.stem[2:]))
    if not paths:
        raise FileNotFoundError(f"no im*.png frames in {clip_dir}")
    boundary = None
    if (clip_dir / "meta.txt").exists():
        raw = read_meta(clip_dir / "meta.txt").get("scene_boundary", "none")
        boundary = None if raw == "none" else int(raw)
    return FrameSequence([load_png(p) for p in paths], role=role, scene_boundary=boundary)


def list_clips(root) -> list:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if p.is_dir() and any(p.glob("im*.png")))


MANIFEST_HEADER = ("clip_id", "source_a", "source_b", "splice_index", "seed")


def write_manifest(path, rows) -> None:
    lines = ["\t".join(MANIFEST_HEADER)]
    lines += ["\t".join(str(r[k]) for k in MANIFEST_HEADER) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def crop_to_multiple(frame: np.ndarray, m: int) -> np.ndarray:
    h, w = frame.shape[:2]
    return frame[: h - h % m, : w - w % m]
