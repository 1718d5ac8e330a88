"""Shared oracles for the test-suite: central differences and tie margins."""
import functools

import numpy as np
import torch

from satvsr.model import ModelConfig, SATVSR
from satvsr.satcore import cosine_corr, split_patches
from satvsr.trainer import charbonnier

TINY = dict(N=1, C=4, B=2, P=4, s=4, d=12)


def tiny_setup(mode, seed, csna=True):
    """Randomly initialised double-precision tiny model plus input, labels, target."""
    torch.manual_seed(seed)
    model = SATVSR(ModelConfig(**TINY, attention_mode=mode, csna_enabled=csna)).double()
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.25)
    g = torch.Generator().manual_seed(seed)
    lr = torch.rand(1, 3, 3, 8, 8, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 4, (1, 4, 3), generator=g)
    labels[:, :, 1] = torch.arange(4)
    target = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    return model, lr, labels, target


def sat_margin(model, lr, labels):
    """Smallest gap between the top-1 and top-2 labeled similarities."""
    with torch.no_grad():
        q, k, _ = model.qkv(model.pos(model.extractor(lr)))
        P = model.config.P
        Q, K = split_patches(q, P), split_patches(k, P)
        b, t, n = K.shape[:3]
        qr = Q[:, t // 2].reshape(b, n, 1, -1)
        kl = torch.stack([K[0, i, labels[0, :, i]] for i in range(t)], dim=1).reshape(b, n, t, -1)
        corr = cosine_corr(qr, kl)
        top = corr.topk(2, dim=-1).values
        return (top[..., 0] - top[..., 1]).min().item()


def relu_margin(model, lr):
    """Smallest |pre-activation| feeding a (leaky) ReLU anywhere in the network."""
    vals = []
    convs = [blk.conv1 for blk in model.extractor.body] + [model.head.up1, model.head.up2]
    hooks = [c.register_forward_hook(lambda m, i, o: vals.append(o.abs().min().item())) for c in convs]
    labels = torch.arange(lr.shape[-1] // model.config.P * lr.shape[-2] // model.config.P)
    labels = labels.view(1, -1, 1).expand(1, -1, lr.shape[1])
    with torch.no_grad():
        model(lr, labels if model.config.attention_mode == "sat" else None)
    for h in hooks:
        h.remove()
    return min(vals) if vals else np.inf


def fd_check(model, lr, labels, target, h=1e-5):
    """Max relative error per top-level parameter group: max|a-n| / max|a|."""
    labels = labels if model.config.attention_mode == "sat" else None

    def loss():
        return charbonnier(model(lr, labels), target)

    params = dict(model.named_parameters())
    grads = dict(zip(params, torch.autograd.grad(loss(), list(params.values()))))
    worst = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                num[i] = (up - down) / (2 * h)
            group = name.split(".")[0]
            a = grads[name].view(-1)
            err, scale = (a - num).abs().max().item(), a.abs().max().item()
            e, s = worst.get(group, (0.0, 0.0))
            worst[group] = (max(e, err), max(s, scale))
    return {g: e / max(s, 1e-300) for g, (e, s) in worst.items()}


def pick_tie_free_seed(mode, start=0, min_gap=1e-3):
    """First seed whose SAT selection and ReLU inputs sit clear of kinks."""
    for seed in range(start, start + 200):
        model, lr, labels, target = tiny_setup(mode, seed)
        ok = relu_margin(model, lr) > 1e-4
        if mode == "sat":
            ok = ok and sat_margin(model, lr, labels) > min_gap
        if ok:
            return seed
    raise RuntimeError("no tie-free seed found")


@functools.lru_cache(maxsize=None)
def gradcheck_errors(mode):
    """Per-group relative errors on the first tie-free tiny model, computed once per session."""
    return fd_check(*tiny_setup(mode, pick_tie_free_seed(mode)))


def brute_sat(Q, K, labels, ref):
    """Loop over every reference patch and every frame; first strict maximum wins."""
    b, t, n = K.shape[:3]
    picks = []
    for bi in range(b):
        for p in range(n):
            q = Q[bi, ref, p].reshape(-1).numpy()
            best, best_t = -np.inf, -1
            for i in range(t):
                k = K[bi, i, labels[bi, p, i]].reshape(-1).numpy()
                nq, nk = np.linalg.norm(q), np.linalg.norm(k)
                c = 0.0 if nq < 1e-12 or nk < 1e-12 else float(np.dot(q, k) / (nq * nk))
                if c > best:
                    best, best_t = c, i
            picks.append((best_t, best))
    return picks


def brute_match(query, level_map, P):
    """Enumerate every P x P block of level_map (already divisible) with a loop."""
    q = query.reshape(-1).numpy()
    c, h, w = level_map.shape
    best, best_i, i = -np.inf, -1, 0
    for r in range(0, h, P):
        for s in range(0, w, P):
            k = level_map[:, r:r + P, s:s + P].reshape(-1).numpy()
            v = float(np.dot(q, k) / (np.linalg.norm(q) * np.linalg.norm(k)))
            if v > best:
                best, best_i = v, i
            i += 1
    return best_i, best
