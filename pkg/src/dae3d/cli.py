"""``dae3d`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .analysis import linear_cka, mask_sweep, recon_report, stage_drift_report, write_csv
from .gradcheck import gradcheck_suite
from .optim import NumericError
from .trainer import (TrainConfig, center_crop, finetune, load_model, load_split, pretrain)
from .volume import FormatError, Manifest, synth_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "pretrain", "finetune", "reconstruct", "gradcheck", "cka", "sweep")


class UsageError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dae3d",
        description="Disruptive-autoencoder pre-training on 3D volumes.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (set in --config files or with --set key=value):\n"
        + C.describe_keys(),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value run configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _finetune_dir(cfg):
    return C.run_dir(cfg) / "finetune"


def cmd_synth(cfg):
    path = C.manifest_path(cfg)
    mods = C._names(cfg["modalities"])
    if not mods:
        raise UsageError("modalities must name at least one modality")
    synth_corpus(path.parent, cfg["count"], mods, cfg["synth_dims"], seed=cfg["seed"],
                 val_fraction=cfg["val_fraction"])
    print(f"wrote {cfg['count']} volumes x {len(mods)} modalities; manifest {path}")


def cmd_pretrain(cfg):
    out = C.run_dir(cfg) / "pretrain"
    run = pretrain(C.manifest_path(cfg), C.model_config(cfg), C.disruption_config(cfg),
                   TrainConfig.from_run_config(cfg), out, resume=cfg["resume"] or None)
    print(f"metrics {run.metrics_path}; checkpoint {run.checkpoint_path}")


def cmd_finetune(cfg):
    pretrained = cfg["pretrained"]
    if pretrained == "auto":
        pretrained = str(C.run_dir(cfg) / "pretrain" / "model.daec")
    run = finetune(C.manifest_path(cfg), pretrained or None, C.model_config(cfg),
                   TrainConfig.from_run_config(cfg, finetune=True), _finetune_dir(cfg),
                   num_classes=cfg["num_classes"], eval_every=cfg["eval_every"])
    print(f"validation Dice {run.val_dice:.4f}; checkpoint {run.checkpoint_path}")


def _probes(cfg, manifest):
    items = load_split(manifest, cfg["probe_split"])
    if not items:
        raise FormatError(f"no probe volumes in split {cfg['probe_split']!r}")
    return items


def cmd_reconstruct(cfg):
    ckpt = cfg["checkpoint"] or C.run_dir(cfg) / "pretrain" / "model.daec"
    model, _ = load_model(ckpt)
    manifest = Manifest.load(C.manifest_path(cfg))
    volumes = [(e.path, v) for e, v, _ in _probes(cfg, manifest)]
    dump = C.run_dir(cfg) / "recon" if cfg["dump_triplets"] else None
    rows = recon_report(model, volumes, C.disruption_config(cfg), dump_dir=dump)
    path = C.run_dir(cfg) / "recon.csv"
    write_csv(path, ("volume", "l1", "psnr"), rows)
    print(f"mean L1 {rows[-1][1]:.5f}, PSNR {rows[-1][2]:.2f} dB; wrote {path}")


def cmd_cka(cfg):
    pre, _ = load_model(cfg["checkpoint"] or C.run_dir(cfg) / "pretrain" / "model.daec")
    ft, _ = load_model(cfg["finetuned"] or _finetune_dir(cfg) / "model.daec")
    manifest = Manifest.load(C.manifest_path(cfg))
    probes = [center_crop(v.voxels, pre.config.crop) for _, v, _ in _probes(cfg, manifest)]
    rows = stage_drift_report(pre, ft, probes)
    path = C.run_dir(cfg) / "cka_stage.csv"
    write_csv(path, ("stage", "cka"), rows)
    for stage, value in rows:
        print(f"stage {stage}: CKA {value:.4f}")


def cmd_sweep(cfg):
    out = C.run_dir(cfg) / "sweep"
    tc = TrainConfig.from_run_config(cfg)
    tc.total_iters = cfg["sweep_iters"]
    tc.warmup_iters = min(tc.warmup_iters, tc.total_iters // 5)
    tc.checkpoint_every = 0
    rows = mask_sweep(C.manifest_path(cfg), cfg["sweep_r"], C.model_config(cfg),
                      C.disruption_config(cfg), tc, out, window=cfg["smooth_window"])
    write_csv(C.run_dir(cfg) / "mask_sweep.csv", ("r", "final_l1"), rows)
    for r, l1 in rows:
        print(f"r={r:.2f}  final L1 {l1:.5f}")


def cmd_gradcheck(cfg):
    report = gradcheck_suite(range(cfg["gradcheck_seeds"]))
    ok = True
    for name, (err, tol) in report.items():
        passed = err < tol
        ok &= passed
        print(f"{name:22s} max rel err {err:.3e}  (< {tol:.0e})  {'PASS' if passed else 'FAIL'}")
    if not ok:
        raise NumericError("gradient check failed")


HANDLERS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "reconstruct": cmd_reconstruct, "gradcheck": cmd_gradcheck, "cka": cmd_cka,
    "sweep": cmd_sweep,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.overrides)
        C.run_dir(cfg).mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg)
    except (C.ConfigError, UsageError) as exc:
        print(f"dae3d: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dae3d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"dae3d: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
