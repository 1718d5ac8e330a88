"""Cross-scale non-local aggregation over an average-pooling pyramid."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .satcore import cosine_corr, merge_patches, split_patches


def build_pyramid(m, levels=3):
    """Level 0 is ``m``; each further level is a 2x2, stride-2 average pool."""
    h, w = m.shape[-2:]
    f = 2 ** levels
    if h % f or w % f:
        raise ValueError(f"feature map {h}x{w} must be divisible by {f} for {levels} pooling levels")
    pyr = [m]
    for _ in range(levels):
        pyr.append(F.avg_pool2d(pyr[-1], 2, 2))
    return pyr


def level_candidates(level_map, P):
    """Split a ``(B, C, h, w)`` map into ``(B, M, C, P, P)`` candidate patches.

    Maps not divisible by P are reflect-padded; a map smaller than P along an
    axis becomes a single full-extent patch along it, resized bilinearly.
    """
    b, c, h, w = level_map.shape
    ph, pw = min(P, h), min(P, w)
    pad_h, pad_w = (-h) % ph, (-w) % pw
    if pad_h or pad_w:
        level_map = F.pad(level_map, (0, pad_w, 0, pad_h), mode="reflect")
    hh, ww = level_map.shape[-2:]
    x = level_map.reshape(b, c, hh // ph, ph, ww // pw, pw).permute(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, -1, c, ph, pw)
    if (ph, pw) != (P, P):
        m = x.shape[1]
        x = F.interpolate(x.reshape(b * m, c, ph, pw), size=(P, P), mode="bilinear", align_corners=False)
        x = x.view(b, m, c, P, P)
    return x


def cross_scale_match(query, level_map, P):
    """Best cosine match in ``level_map`` for each query patch.

    query: ``(B, Nq, C, P, P)``. Returns ``(matched, index, sim)`` with
    ``matched`` shaped like ``query``. Ties go to the smallest candidate index.
    """
    cand = level_candidates(level_map, P)  # (B, M, C, P, P)
    b, nq = query.shape[:2]
    corr = cosine_corr(query.reshape(b, nq, 1, -1), cand.reshape(b, 1, cand.shape[1], -1))
    sim = corr.max(dim=-1).values
    index = (corr == sim.unsqueeze(-1)).to(torch.int64).argmax(dim=-1)
    matched = cand[torch.arange(b, device=cand.device)[:, None], index]
    return matched, index, sim


def aggregate(query, matches, gates, conv):
    """``conv([query, g1*m1, g2*m2, g3*m3])`` along channels.

    ``gates`` broadcast against the matches, e.g. shape ``(..., 1, 1, 1)``.
    """
    if any(m.shape != query.shape for m in matches):
        raise ValueError("matches must have the query's shape")
    parts = [query] + [g * m for g, m in zip(gates, matches)]
    x = torch.cat(parts, dim=-3)
    lead = x.shape[:-3]
    out = conv(x.reshape(-1, *x.shape[-3:]))
    return out.reshape(*lead, *out.shape[-3:])


class CrossScaleAggregation(nn.Module):
    def __init__(self, channels, patch, levels=3):
        super().__init__()
        self.patch = patch
        self.levels = levels
        self.gate = nn.ModuleList([nn.Linear(2 * channels, 1) for _ in range(levels)])
        self.aggr = nn.Conv2d((levels + 1) * channels, channels, 3, 1, 1)
        # the block starts as an identity on its residual path
        nn.init.zeros_(self.aggr.weight)
        nn.init.zeros_(self.aggr.bias)

    def gates(self, query, matches):
        """Per-patch scalar gates in (0, 1) from pooled query/match statistics."""
        q_stat = query.mean(dim=(-2, -1))
        return [
            torch.sigmoid(lin(torch.cat([q_stat, m.mean(dim=(-2, -1))], dim=-1)))[..., None, None]
            for lin, m in zip(self.gate, matches)
        ]

    def forward(self, m):
        b, c, h, w = m.shape
        P = self.patch
        rows, cols = h // P, w // P
        pyr = build_pyramid(m, self.levels)
        # (B, N, P*P, C) -> (B, N, C, P, P)
        query = split_patches(m, P).permute(0, 1, 3, 2).reshape(b, rows * cols, c, P, P)
        matches = [cross_scale_match(query, pyr[l], P)[0] for l in range(1, self.levels + 1)]
        g = self.gates(query, matches)

        def to_map(patches):
            tok = patches.reshape(b, rows * cols, c, P * P).permute(0, 1, 3, 2)
            return merge_patches(tok, rows, cols)

        gated = [to_map(gi * mi) for gi, mi in zip(g, matches)]
        ones = [torch.ones(1, dtype=m.dtype, device=m.device)] * self.levels
        return m + aggregate(m, gated, ones, self.aggr)
