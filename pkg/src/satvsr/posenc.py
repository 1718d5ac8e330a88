"""Fixed three-axis sinusoidal positional encoding over (frame, patch row, patch col)."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn


def sinusoidal_pe(T: int, rows: int, cols: int, d: int) -> np.ndarray:
    """Return a (T, rows, cols, d) grid.

    Channels split into three groups of d/3 (temporal, vertical, horizontal).
    Inside a group, channel 2k holds sin(p * a_k) and 2k+1 holds cos(p * a_k),
    with a_k = 10000 ** (-2k / (d/3)).
    """
    if d <= 0 or d % 6:
        raise ValueError(f"positional-encoding width d={d} must be a positive multiple of 6")
    g = d // 3
    k = np.arange(g // 2, dtype=np.float64)
    alpha = 1.0 / np.power(10000.0, 2.0 * k / g)

    def axis_code(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * alpha[None, :]
        code = np.empty((n, g))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code

    pe = np.empty((T, rows, cols, d))
    pe[..., :g] = axis_code(T)[:, None, None, :]
    pe[..., g:2 * g] = axis_code(rows)[None, :, None, :]
    pe[..., 2 * g:] = axis_code(cols)[None, None, :, :]
    return pe


def add_pe(tokens, pe, bias=None):
    """Elementwise ``tokens + pe (+ bias)``; all must share (T, rows, cols, d) geometry."""
    if tuple(tokens.shape[-4:]) != tuple(pe.shape[-4:]):
        raise ValueError(f"token geometry {tuple(tokens.shape)} does not match PE {tuple(pe.shape)}")
    out = tokens + pe
    if bias is not None:
        if tuple(bias.shape[-4:]) != tuple(pe.shape[-4:]):
            raise ValueError("learnable PE bias geometry mismatch")
        out = out + bias
    return out


class PatchPositionalEncoding(nn.Module):
    """Adds the d-channel grid code to every patch of a (B, T, C, H, W) feature map.

    The code is embedded into C channels by a bias-free linear map and
    broadcast over the P×P pixels of each patch. With ``learnable_grid`` set, a
    zero-initialised per-position bias is added on top of the fixed code.
    """

    def __init__(self, d, channels, patch, learnable_grid=None):
        super().__init__()
        self.d = d
        self.patch = patch
        self.proj = nn.Linear(d, channels, bias=False)
        self.bias = None
        if learnable_grid is not None:
            self.bias = nn.Parameter(torch.zeros(*learnable_grid, d))
        self._cache = {}

    def code(self, T, rows, cols, like):
        key = (T, rows, cols)
        if key not in self._cache:
            self._cache[key] = torch.from_numpy(sinusoidal_pe(T, rows, cols, self.d))
        return self._cache[key].to(dtype=like.dtype, device=like.device)

    def forward(self, feat):
        b, t, c, h, w = feat.shape
        rows, cols = h // self.patch, w // self.patch
        pe = self.code(t, rows, cols, feat)
        if self.bias is not None and tuple(self.bias.shape[:3]) != (t, rows, cols):
            raise ValueError(
                f"learnable PE was built for grid {tuple(self.bias.shape[:3])}, got {(t, rows, cols)}"
            )
        code = self.proj(add_pe(torch.zeros_like(pe), pe, self.bias))  # (T, rows, cols, C)
        code = code.permute(0, 3, 1, 2)
        code = code.repeat_interleave(self.patch, dim=2).repeat_interleave(self.patch, dim=3)
        return feat + code.unsqueeze(0)
