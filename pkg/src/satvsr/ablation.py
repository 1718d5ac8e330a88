"""Base / Base+SAT / Base+SAT+CNA variants trained under one budget and seed."""
from __future__ import annotations

import logging
from dataclasses import replace

from .evalkit import ModelPredictor, run_benchmark
from .trainer import build_model, train

log = logging.getLogger(__name__)

VARIANTS = {
    "Base": dict(attention_mode="global", csna_enabled=False),
    "Base+SAT": dict(attention_mode="sat", csna_enabled=False),
    "Base+SAT+CNA": dict(attention_mode="sat", csna_enabled=True),
}


def run_ablation(train_clips, eval_clips, config, spec, provider="synthetic_known", out_dir=None, meta=None):
    """Train and evaluate every variant; returns ``{name: MetricsReport}``."""
    reports = {}
    for name, overrides in VARIANTS.items():
        cfg = replace(config, **overrides)
        model = build_model(cfg, spec.seed)
        sub = None if out_dir is None else f"{out_dir}/{name}"
        train(model, train_clips, spec, sub)
        report = run_benchmark(ModelPredictor(model, provider), eval_clips,
                               meta={**(meta or {}), "variant": name, "config_hash": cfg.digest(),
                                     "seed": spec.seed, "iterations": spec.total_iters})
        log.info("%s: %.2f/%.4f", name, report.psnr, report.ssim)
        reports[name] = report
    return reports
