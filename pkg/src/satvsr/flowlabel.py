"""Optical-flow providers and flow-to-patch label grids.

Flow convention: a field defined on the reference grid, ``flow[y, x] = (dx, dy)``,
such that reference content at ``(x, y)`` is found at ``(x + dx, y + dy)`` in the
support frame. This is the backward-warping flow that pulls a support frame
toward the reference.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLOW_MAGIC = b"SATF"
PROVIDERS = ("block_matching", "synthetic_known", "external_import")


@dataclass
class FlowField:
    displacement: np.ndarray  # H×W×2, (dx, dy)

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"flow must be H×W×2, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("flow contains non-finite values")
        h, w = d.shape[:2]
        if np.any(np.abs(d[..., 0]) >= w) or np.any(np.abs(d[..., 1]) >= h):
            raise ValueError("flow displacement exceeds frame size")
        self.displacement = d


@dataclass
class LabelGrid:
    labels: np.ndarray  # (num_patches, T) int, labels[p, t] = patch index in frame t
    rows: int
    cols: int
    ref_index: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def T(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def identity(cls, T: int, rows: int, cols: int, ref_index=None):
        n = rows * cols
        labels = np.repeat(np.arange(n)[:, None], T, axis=1)
        return cls(labels, rows, cols, T // 2 if ref_index is None else ref_index)


def _gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    return frame.mean(axis=2) if frame.ndim == 3 else frame


def block_matching(ref, nbr, block: int, radius: int = None) -> FlowField:
    """Exhaustive integer SAD search per ``block``×``block`` reference block.

    Candidates whose footprint leaves the support frame are skipped. Among
    equal SAD the displacement closest to zero wins (L1, then L-inf, then
    raster order of the search window).
    """
    ref, nbr = _gray(ref), _gray(nbr)
    if ref.shape != nbr.shape:
        raise ValueError(f"frame shapes differ: {ref.shape} vs {nbr.shape}")
    if radius is None:
        radius = 2 * block
    h, w = ref.shape
    rows, cols = h // block, w // block
    hc, wc = rows * block, cols * block
    ys = np.arange(rows)[:, None] * block
    xs = np.arange(cols)[None, :] * block

    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    cands.sort(key=lambda d: (abs(d[0]) + abs(d[1]), max(abs(d[0]), abs(d[1]))))

    best = np.full((rows, cols), np.inf)
    best_d = np.zeros((rows, cols, 2))
    pad = radius
    big = np.pad(nbr, pad, mode="constant", constant_values=np.nan)
    for dy, dx in cands:
        shifted = big[pad + dy:pad + dy + hc, pad + dx:pad + dx + wc]
        diff = np.abs(shifted - ref[:hc, :wc]).reshape(rows, block, cols, block)
        sad = diff.sum(axis=(1, 3))
        valid = (ys + dy >= 0) & (ys + dy + block <= h) & (xs + dx >= 0) & (xs + dx + block <= w)
        better = valid & (sad < best)
        best[better] = sad[better]
        best_d[better] = (dx, dy)
    disp = np.zeros((h, w, 2))
    disp[:hc, :wc] = np.repeat(np.repeat(best_d, block, axis=0), block, axis=1)
    return FlowField(disp)


def write_flow(path, flow) -> None:
    """Binary flow file: b'SATF', uint32 H, uint32 W, then H*W (dx, dy) float32 pairs, row-major."""
    d = flow.displacement if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = d.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow file (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != h * w * 2 * 4:
        raise ValueError(f"{path}: expected {h * w * 8} payload bytes, found {len(payload)}")
    d = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return FlowField(d)


def estimate_flow(ref, nbr, provider: str = "block_matching", *, block: int = 8, radius=None,
                  known=None, path=None) -> FlowField:
    if provider == "block_matching":
        return block_matching(ref, nbr, block, radius)
    if provider == "synthetic_known":
        if known is None:
            raise ValueError("synthetic_known needs the clip's stored flow")
        return known if isinstance(known, FlowField) else FlowField(known)
    if provider == "external_import":
        if path is None:
            raise ValueError("external_import needs a flow file path")
        return read_flow(path)
    raise ValueError(f"unknown flow provider {provider!r}; choose from {PROVIDERS}")


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def build_labels(flows, P: int, s: int, H: int, W: int, ref_index=None) -> LabelGrid:
    """Map every reference patch to a patch cell in each frame.

    The patch's mean flow, in units of P, is rounded half away from zero and
    added to its cell coordinates; targets outside the grid clamp to the edge.
    """
    if s != P:
        raise ValueError("only non-overlapping patches (s == P) are supported")
    if H % P or W % P:
        raise ValueError(f"frame {H}x{W} not divisible by patch size {P}")
    rows, cols = H // P, W // P
    T = len(flows)
    if ref_index is None:
        ref_index = T // 2
    labels = np.empty((rows * cols, T), dtype=np.int64)
    r0 = np.arange(rows)[:, None].repeat(cols, axis=1)
    c0 = np.arange(cols)[None, :].repeat(rows, axis=0)
    for t, fl in enumerate(flows):
        d = fl.displacement if isinstance(fl, FlowField) else np.asarray(fl, dtype=np.float64)
        if d.shape[:2] != (H, W):
            raise ValueError(f"flow {t} has shape {d.shape[:2]}, expected {(H, W)}")
        mean = d.reshape(rows, P, cols, P, 2).mean(axis=(1, 3))
        r = np.clip(r0 + round_half_away(mean[..., 1] / P).astype(np.int64), 0, rows - 1)
        c = np.clip(c0 + round_half_away(mean[..., 0] / P).astype(np.int64), 0, cols - 1)
        labels[:, t] = (r * cols + c).ravel()
    labels[:, ref_index] = np.arange(rows * cols)
    return LabelGrid(labels, rows, cols, ref_index)


def labels_for_clip(lr, P: int, provider: str = "block_matching", flow_dir=None, radius=None) -> LabelGrid:
    """Estimate flows from the reference frame to every frame of ``lr`` and label them."""
    ref_t = lr.ref_index
    ref = lr.frames[ref_t]
    flows = []
    for t, frame in enumerate(lr.frames):
        if t == ref_t:
            flows.append(FlowField(np.zeros(ref.shape[:2] + (2,))))
            continue
        known = lr.flows[t] if provider == "synthetic_known" and lr.flows is not None else None
        path = Path(flow_dir) / f"flow{t + 1}.flo" if flow_dir is not None else None
        flows.append(estimate_flow(ref, frame, provider, block=P, radius=radius, known=known, path=path))
    H, W = lr.shape
    return build_labels(flows, P, P, H, W, ref_t)
