"""Representation and reconstruction analysis."""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .model import disrupt_batch, forward
from .trainer import center_crop, fmt, pretrain, read_metrics, smooth
from .volume import Volume, save_volume


def _center(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"CKA needs a (samples >= 2, features) matrix, got {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x, y):
    """Linear centered kernel alignment between two (samples x features) matrices."""
    xc, yc = _center(x), _center(y)
    if xc.shape[0] != yc.shape[0]:
        raise ValueError(f"sample counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    n = xc.shape[0]
    if max(xc.shape[1], yc.shape[1]) > n:
        # Gram-matrix form is cheaper when features outnumber samples
        k, l = xc @ xc.T, yc @ yc.T
        cross, nx, ny = np.sum(k * l), np.linalg.norm(k), np.linalg.norm(l)
    else:
        cross = np.linalg.norm(xc.T @ yc) ** 2
        nx, ny = np.linalg.norm(xc.T @ xc), np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        raise ValueError("CKA undefined: an input has zero variance")
    return float(cross / (nx * ny))


def stage_drift_report(pretrained, finetuned, probes):
    """Per-stage CKA between two models on identical probe crops.

    Stage 1 is the post-embedding token grid, stage k+1 the output of block k.
    """
    if pretrained.architecture_hash() != finetuned.architecture_hash():
        raise ValueError("models differ in backbone architecture")
    x = np.stack([p.voxels if isinstance(p, Volume) else p for p in probes])
    a = pretrained.stage_features(x)
    b = finetuned.stage_features(x)
    return [(i + 1, linear_cka(fa, fb)) for i, (fa, fb) in enumerate(zip(a, b))]


def psnr(mse, peak=1.0):
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def recon_report(model, volumes, dis_cfg, dump_dir=None, step=0):
    """L1 and PSNR of reconstructions of clean centre crops from disrupted inputs.

    ``volumes`` is a list of ``(name, Volume)``. Returns per-volume rows
    ``(name, l1, psnr)`` and an aggregate row named ``mean``.
    """
    rows = []
    for name, vol in volumes:
        crop = vol.with_voxels(center_crop(vol.voxels, model.config.crop))
        recon, _, _ = forward([crop], dis_cfg, model, step=step)
        out = recon.data[0].astype(np.float64)
        resid = out - crop.voxels
        rows.append((name, float(np.abs(resid).mean()), psnr(float((resid**2).mean()))))
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            stem = Path(name).stem
            disrupted, _ = disrupt_batch([crop], dis_cfg, step)
            save_volume(dump_dir / f"{stem}.input.dvol", crop)
            save_volume(dump_dir / f"{stem}.disrupted.dvol", crop.with_voxels(disrupted[0]))
            save_volume(dump_dir / f"{stem}.recon.dvol", crop.with_voxels(out))
    l1s = [r[1] for r in rows]
    mses = [10 ** (-r[2] / 10) if math.isfinite(r[2]) else 0.0 for r in rows]
    rows.append(("mean", float(np.mean(l1s)), psnr(float(np.mean(mses)))))
    return rows


def mask_sweep(manifest, r_values, model_cfg, dis_cfg, train_cfg, out_dir, window=20):
    """Short pre-training per masking ratio; rows of (r, final smoothed L1)."""
    out_dir = Path(out_dir)
    rows = []
    for r in r_values:
        run = pretrain(manifest, model_cfg, replace(dis_cfg, mask_ratio=float(r)), train_cfg,
                       out_dir / f"r_{r:.3f}")
        l1 = read_metrics(run.metrics_path)["loss_l1"]
        rows.append((float(r), float(smooth(l1, window)[-1])))
    write_csv(out_dir / "mask_sweep.csv", ("r", "final_l1"), rows)
    return rows


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")
