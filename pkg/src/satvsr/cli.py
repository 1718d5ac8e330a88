"""Command-line entry point: ``satvsr {dataset,train,eval,ablate,infer}``.

Exit codes: 0 success, 1 user error, 2 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as rc
from . import flowlabel
from . import videodata as vd
from .ablation import run_ablation
from .evalkit import ModelPredictor, ablation_table, bicubic_predict, run_benchmark
from .model import load_checkpoint
from .trainer import build_model, make_train_clip, resume, train

log = logging.getLogger("satvsr")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are user errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- dataset -----------------------------------------------------------------

def _crop_sequence(seq, multiple):
    frames = [vd.crop_to_multiple(f, multiple) for f in seq.frames]
    flows = None if seq.flows is None else [vd.crop_to_multiple(f, multiple) for f in seq.flows]
    return vd.FrameSequence(frames, seq.role, seq.scene_boundary, flows)


def _write_example(out, clip_id, hr, spec, **provenance):
    lr = vd.make_lr_sequence(hr, spec)
    vd.save_clip(hr, out / "hr" / clip_id, **provenance)
    vd.save_clip(lr, out / "lr" / clip_id, **provenance)
    if lr.flows is not None:
        fdir = out / "flow" / clip_id
        fdir.mkdir(parents=True, exist_ok=True)
        for t, fl in enumerate(lr.flows, start=1):
            flowlabel.write_flow(fdir / f"flow{t}.flo", fl)


def cmd_dataset(args, cfg):
    spec = rc.degradation(cfg)
    out = Path(args.out)
    T = 2 * cfg["N"] + 1
    multiple = spec.scale * max(cfg["P"], 2 ** cfg["pyramid_levels"])
    if args.synthetic:
        sources = [(f"syn{i:04d}", vd.synthetic_clip(cfg["seed"] * 100003 + i, size=args.size, T=T))
                   for i in range(args.synthetic)]
    elif args.source:
        root = Path(args.source)
        if not root.is_dir():
            raise UserError(f"source directory {root} does not exist")
        ids = vd.list_clips(root)
        if not ids:
            raise UserError(f"no clips (im*.png) found under {root}")
        sources = [(i, vd.load_clip(root / i)) for i in ids]
    else:
        raise UserError("dataset needs --source DIR or --synthetic N")
    sources = [(i, _crop_sequence(s, multiple)) for i, s in sources]
    for i, s in sources:
        if s.T != T:
            raise UserError(f"clip {i} has {s.T} frames, expected {T}")

    if args.fuse:
        plan = vd.fusion_plan(len(sources), T, cfg["seed"])
        rows = []
        for n, ((src_a, a), f) in enumerate(zip(sources, plan)):
            src_b, b = sources[f.partner_index]
            clip_id = f"fused{n:04d}"
            fused = vd.fuse_sequences(a, b, f.splice_index)
            _write_example(out, clip_id, fused, spec, source_a=src_a, source_b=src_b, seed=cfg["seed"])
            rows.append(dict(clip_id=clip_id, source_a=src_a, source_b=src_b, splice_index=f.splice_index,
                             seed=cfg["seed"]))
        vd.write_manifest(out / "fusion_manifest.tsv", rows)
    else:
        for clip_id, seq in sources:
            _write_example(out, clip_id, seq, spec)
    log.info("wrote %d clips to %s", len(sources), out)
    return 0


# -- data loading ------------------------------------------------------------

def load_dataset(root, cfg):
    """``[(clip_id, lr_seq, hr_seq_or_None, flow_dir_or_None)]`` from a dataset directory."""
    root = Path(root)
    if not (root / "lr").is_dir():
        raise UserError(f"{root} is not a dataset directory (missing lr/)")
    out = []
    for clip_id in vd.list_clips(root / "lr"):
        lr = vd.load_clip(root / "lr" / clip_id, vd.LR)
        hr_dir = root / "hr" / clip_id
        hr = vd.load_clip(hr_dir, vd.HR) if hr_dir.is_dir() else None
        flow_dir = root / "flow" / clip_id
        out.append((clip_id, lr, hr, flow_dir if flow_dir.is_dir() else None))
    if not out:
        raise UserError(f"no LR clips under {root / 'lr'}")
    return out


def _provider_for(cfg, flow_dir):
    if cfg["flow_provider"] == "external_import" and flow_dir is None:
        raise UserError("flow_provider=external_import but the dataset has no flow/ directory")
    return cfg["flow_provider"]


def train_clips(entries, cfg):
    clips = []
    for clip_id, lr, hr, flow_dir in entries:
        if hr is None:
            continue
        provider = _provider_for(cfg, flow_dir)
        clips.append(make_train_clip(lr, hr, provider, cfg["P"], clip_id,
                                     flow_dir if provider == "external_import" else None))
    if not clips:
        raise UserError("no clips with HR ground truth to train on")
    return clips


def _meta(cfg, **extra):
    return {"config_hash": rc.model_config(cfg).digest(), "seed": cfg["seed"], **extra}


# -- commands ----------------------------------------------------------------

def cmd_train(args, cfg):
    spec = rc.train_spec(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = train_clips(load_dataset(args.data, cfg), cfg)
    (out / "run_config.txt").write_text(rc.dump(cfg))
    if args.resume:
        if not Path(args.resume).exists():
            raise UserError(f"checkpoint {args.resume} not found")
        _, rows = resume(args.resume, clips, spec, out)
    else:
        model = build_model(rc.model_config(cfg), spec.seed)
        rows = train(model, clips, spec, out)
    if rows:
        log.info("finished at iteration %d, loss %.6f", rows[-1][0] + 1, rows[-1][2])
    return 0


def _eval_predictor(args, cfg):
    if args.baseline == "bicubic":
        return bicubic_predict, {"model": "bicubic"}
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise UserError(f"checkpoint {args.checkpoint!r} not found (or pass --baseline bicubic)")
    model, it, _ = load_checkpoint(args.checkpoint)
    return ModelPredictor(model, cfg["flow_provider"]), {"model": str(args.checkpoint), "iteration": it,
                                                         "config_hash": model.config.digest()}


def _with_flow_provider(predict, cfg):
    if predict is bicubic_predict:
        return predict

    def run(lr_seq, flow_dir=None):
        _provider_for(cfg, flow_dir)
        return predict(lr_seq, flow_dir=flow_dir)
    return run


def cmd_eval(args, cfg):
    entries = load_dataset(args.data, cfg)
    predict, info = _eval_predictor(args, cfg)
    meta = {**_meta(cfg), **info, "dataset": str(args.data)}
    report = run_benchmark(_with_flow_provider(predict, cfg), entries, meta)
    report.write(args.out)
    print(report.table())
    return 0


def cmd_ablate(args, cfg):
    spec = rc.train_spec(cfg)
    entries = load_dataset(args.data, cfg)
    clips = train_clips(entries, cfg)
    eval_entries = load_dataset(args.eval_data, cfg) if args.eval_data else entries
    provider = cfg["flow_provider"]
    eval_set = [(i, lr, hr, fd if provider == "external_import" else None) for i, lr, hr, fd in eval_entries]
    reports = run_ablation(clips, eval_set, rc.model_config(cfg), spec, provider, args.out,
                           meta={"dataset": str(args.eval_data or args.data)})
    out = Path(args.out)
    for name, rep in reports.items():
        rep.write(out, f"report_{name}")
    table = ablation_table(reports)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_infer(args, cfg):
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise UserError(f"checkpoint {args.checkpoint!r} not found")
    model, _, _ = load_checkpoint(args.checkpoint)
    clip_dir = Path(args.clip)
    if not clip_dir.is_dir():
        raise UserError(f"clip directory {clip_dir} does not exist")
    lr = vd.load_clip(clip_dir, vd.LR)
    flow_dir = Path(args.flow_dir) if args.flow_dir else None
    provider = "external_import" if flow_dir is not None else "block_matching"
    sr = ModelPredictor(model, provider)(lr, flow_dir=flow_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vd.save_png(sr, out / "sr.png")
    print(out / "sr.png")
    return 0


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "infer": cmd_infer}


def _config_epilog():
    width = max(len(k) for k in rc.DEFAULTS)
    lines = ["run-config keys (file: 'key = value'; flags override the file):"]
    lines += [f"  {k:<{width}}  {rc.DEFAULTS[k]!s:<16} {rc.HELP.get(k, '')}" for k in rc.DEFAULTS]
    return "\n".join(lines)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value run-config file")
    common.add_argument("--out", default="runs", help="directory for every artifact (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("run-config overrides")
    for key, default in rc.DEFAULTS.items():
        dest = "iters" if key == "total_iters" else key
        flags = [f"--{key}"] + (["--iters"] if key == "total_iters" else [])
        keys.add_argument(*flags, dest=dest, default=None, metavar="V",
                          help=f"{rc.HELP.get(key, '')} (default: {default})")

    parser = _Parser(prog="satvsr", description=__doc__.splitlines()[0],
                                     epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, epilog=_config_epilog(),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("dataset", "build degraded (optionally fused cross-scene) clips")
    p.add_argument("--source", help="directory of HR clips <id>/im1.png ...")
    p.add_argument("--synthetic", type=int, default=0, help="generate N synthetic panning clips instead")
    p.add_argument("--size", type=int, default=64, help="synthetic HR frame side (default: 64)")
    p.add_argument("--fuse", action="store_true", help="splice clip pairs into cross-scene clips")

    p = add("train", "train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("eval", "PSNR/SSIM on the Y channel over a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["bicubic"])

    p = add("ablate", "train and evaluate Base, Base+SAT, Base+SAT+CNA")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", dest="eval_data", help="evaluation dataset (default: --data)")

    p = add("infer", "super-resolve the reference frame of one LR clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="LR clip directory")
    p.add_argument("--flow-dir", dest="flow_dir", help="directory of flow<t>.flo files (else block matching)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, "iters" if k == "total_iters" else k) for k in rc.DEFAULTS}
    try:
        cfg = rc.resolve(args.config, overrides)
        rc.model_config(cfg)
        rc.train_spec(cfg)
        torch.manual_seed(cfg["seed"])
        np.random.seed(cfg["seed"])
        return COMMANDS[args.command](args, cfg)
    except (UserError, rc.ConfigKeyError, FileNotFoundError) as err:
        print(f"satvsr {args.command}: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001
        log.exception("internal error")
        print(f"satvsr {args.command}: internal error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
