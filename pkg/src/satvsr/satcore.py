"""Feature extraction, Q/K/V projection and the two patch-attention variants.

Tensor layout: feature maps are ``(B, T, C, H, W)``; patch tokens are
``(B, T, N, P*P, C)`` with patches in row-major grid order.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

NORM_EPS = 1e-12


class ResidualBlock(nn.Module):
    """conv-ReLU-conv with identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class FeatureExtractor(nn.Module):
    def __init__(self, channels=64, num_blocks=5, in_channels=3):
        super().__init__()
        self.conv_first = nn.Conv2d(in_channels, channels, 3, 1, 1)
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])

    def forward(self, frames):
        # frames: (B, T, 3, H, W), weights shared across frames
        b, t, c, h, w = frames.shape
        feat = self.body(self.conv_first(frames.reshape(b * t, c, h, w)))
        return feat.view(b, t, -1, h, w)


class QKVProjection(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.to_q = nn.Conv2d(channels, channels, 3, 1, 1)
        self.to_k = nn.Conv2d(channels, channels, 3, 1, 1)
        self.to_v = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, feat):
        b, t, c, h, w = feat.shape
        flat = feat.reshape(b * t, c, h, w)
        return tuple(conv(flat).view(b, t, c, h, w) for conv in (self.to_q, self.to_k, self.to_v))


def split_patches(f, P, s=None):
    """``(..., C, H, W)`` -> ``(..., N, P*P, C)``."""
    s = P if s is None else s
    if s != P:
        raise ValueError("only non-overlapping patches (s == P) are supported")
    *lead, c, h, w = f.shape
    if h % P or w % P:
        raise ValueError(f"feature map {h}x{w} not divisible by patch size {P}")
    rows, cols = h // P, w // P
    x = f.reshape(*lead, c, rows, P, cols, P)
    n = len(lead)
    x = x.permute(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return x.reshape(*lead, rows * cols, P * P, c)


def merge_patches(tokens, rows, cols):
    """Inverse of :func:`split_patches` for a ``rows``×``cols`` patch grid."""
    *lead, n_tok, pp, c = tokens.shape
    P = math.isqrt(pp)
    if P * P != pp or n_tok != rows * cols:
        raise ValueError(f"cannot merge {n_tok} tokens of {pp} pixels into a {rows}x{cols} grid")
    n = len(lead)
    x = tokens.reshape(*lead, rows, cols, P, P, c)
    x = x.permute(*range(n), n + 4, n, n + 2, n + 1, n + 3)
    return x.reshape(*lead, c, rows * P, cols * P)


def cosine_corr(q, k):
    """Cosine similarity over the last axis; 0 when either norm is below 1e-12."""
    nq = q.norm(dim=-1)
    nk = k.norm(dim=-1)
    denom = nq * nk
    ok = (nq >= NORM_EPS) & (nk >= NORM_EPS)
    dot = (q * k).sum(dim=-1)
    return torch.where(ok, dot / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dot))


def sat_attend(Q, K, V, labels, ref_index):
    """Scenario-corresponding attention.

    Q, K, V: ``(B, T, N, P*P, C)`` tokens. labels: ``(B, N, T)`` long tensor,
    labels[b, p, t] = patch in frame t corresponding to reference patch p.

    Returns ``(out, frame, sim)``: ``out`` is ``(B, N, P*P, 2C)`` holding
    ``[Q_ref, s * V_sel]`` along channels, ``frame`` the selected frame per
    patch and ``sim`` the top-1 similarity. Ties go to the smallest frame.
    """
    b, t, n, pp, c = K.shape
    if labels.shape != (b, n, t):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match tokens {(b, n, t)}")
    d = pp * c
    q = Q[:, ref_index].reshape(b, n, d)
    k = K.reshape(b, t, n, d)
    v = V.reshape(b, t, n, d)
    frame_ids = torch.arange(t, device=K.device).view(1, 1, t).expand(b, n, t)
    batch_ids = torch.arange(b, device=K.device).view(b, 1, 1).expand(b, n, t)
    k_lab = k[batch_ids, frame_ids, labels]  # (B, N, T, D)
    corr = cosine_corr(q.unsqueeze(2), k_lab)  # (B, N, T)
    sim, frame = corr.max(dim=-1)
    # torch.max does not promise first-index ties; argmax over the exact max does
    frame = (corr == sim.unsqueeze(-1)).to(torch.int64).argmax(dim=-1)
    sel_label = labels.gather(2, frame.unsqueeze(-1)).squeeze(-1)
    v_sel = v[batch_ids[..., 0], frame, sel_label]  # (B, N, D)
    out = torch.cat([q.view(b, n, pp, c), (sim.unsqueeze(-1) * v_sel).view(b, n, pp, c)], dim=-1)
    return out, frame, sim


def global_attend(Q, K, V, ref_index):
    """Scaled dot-product attention of every reference token over all T*N keys.

    Returns ``(out, weights)`` with ``out`` = ``[Q_ref, attn(V)]`` of shape
    ``(B, N, P*P, 2C)`` and ``weights`` of shape ``(B, N, T*N)``.
    """
    b, t, n, pp, c = K.shape
    d = pp * c
    q = Q[:, ref_index].reshape(b, n, d)
    k = K.reshape(b, t * n, d)
    v = V.reshape(b, t * n, d)
    weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d), dim=-1)
    attended = weights @ v
    out = torch.cat([q.view(b, n, pp, c), attended.view(b, n, pp, c)], dim=-1)
    return out, weights


class PatchAttention(nn.Module):
    """Runs sat/global attention on projected tokens and fuses 2C -> C with a 1x1 conv."""

    def __init__(self, channels, patch, mode="sat"):
        super().__init__()
        if mode not in ("sat", "global"):
            raise ValueError(f"attention_mode must be 'sat' or 'global', got {mode!r}")
        self.patch = patch
        self.mode = mode
        self.fuse = nn.Conv2d(2 * channels, channels, 1, 1, 0)
        self.last_selection = None

    def forward(self, q, k, v, labels=None):
        b, t, c, h, w = q.shape
        P = self.patch
        ref = t // 2
        Q, K, V = (split_patches(x, P) for x in (q, k, v))
        if self.mode == "sat":
            if labels is None:
                raise ValueError("sat attention needs a label grid")
            out, frame, sim = sat_attend(Q, K, V, labels, ref)
            self.last_selection = (frame.detach(), sim.detach())
        else:
            out, _ = global_attend(Q, K, V, ref)
        merged = merge_patches(out, h // P, w // P)
        return self.fuse(merged)
