"""Acceptance criteria, each checked at its stated tolerance.

Criteria 5 to 8 share one 30-volume-per-modality corpus and one default
2000-step pre-training run, so the whole module takes most of an hour on a
single core.
"""

import dataclasses
import itertools
import math
import shutil
import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from conftest import record
from dae3d import config as C
from dae3d.analysis import linear_cka, stage_drift_report
from dae3d.disruption import (DisruptionConfig, add_noise, apply_local_mask, disrupt, down_up,
                              make_mask_plan)
from dae3d.gradcheck import gradcheck_suite
from dae3d.losses import cmcl_loss, dice_loss, label_matrix, pretrain_loss, similarity
from dae3d.model import ModelConfig, TokenGrid, l2_normalize
from dae3d.optim import AdamW, lr_schedule
from dae3d.tensor import Tensor, float64_mode
from dae3d.trainer import (TrainConfig, center_crop, finetune, load_model, load_split, pretrain,
                           read_metrics, smooth)
from dae3d.volume import Manifest, Volume, synth_corpus

pytestmark = pytest.mark.slow

MODALITIES = ["SYNTH_A", "SYNTH_B", "SYNTH_C"]
SEEDS = (0, 1, 2)
WINDOW = 20
# default recipe, checkpointing often enough to resume near the end
PRETRAIN = TrainConfig(checkpoint_every=100)


# -- shared desk-scale runs -------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return synth_corpus(tmp_path_factory.mktemp("corpus"), 30, MODALITIES, dims=(40, 40, 40))


@pytest.fixture(scope="module")
def pretrain_run(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("pretrain")
    t0 = time.perf_counter()
    run = pretrain(corpus, ModelConfig(), DisruptionConfig(), PRETRAIN, root / "a")
    return run, time.perf_counter() - t0


@pytest.fixture(scope="module")
def finetune_runs(corpus, pretrain_run, tmp_path_factory):
    root = tmp_path_factory.mktemp("finetune")
    base = TrainConfig.from_run_config(C.defaults(), finetune=True)
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        tc = dataclasses.replace(base, seed=seed)
        runs["dae", seed] = finetune(corpus, pretrain_run[0].checkpoint_path, ModelConfig(), tc,
                                     root / f"dae_{seed}")
        runs["scratch", seed] = finetune(corpus, None, ModelConfig(), tc, root / f"scratch_{seed}")
    return runs, time.perf_counter() - t0


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    report = gradcheck_suite(range(20))
    elapsed = time.perf_counter() - t0
    worst = {k: f"{e:.1e}<{tol:.0e}" for k, (e, tol) in report.items()}
    ok = all(e < tol for e, tol in report.values()) and elapsed < 120
    assert record(1, ok, f"20 seeds, {elapsed:.0f}s; {worst}")


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_disruption():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = True
    for _ in range(100):
        n, c, r = int(rng.integers(1, 200)), int(rng.integers(1, 200)), float(rng.random())
        plan = make_mask_plan(n, c, r, int(rng.integers(2**32)))
        tokens = rng.normal(size=(n, c)).astype(np.float32) + 10.0
        out = apply_local_mask(TokenGrid(Tensor(tokens), (1, 1, n), (1, 1, 1)), plan).tokens.data
        exact &= bool(((out == 0).sum(axis=1) == math.floor(r * c)).all())

    tokens = rng.normal(size=(64, 96)).astype(np.float32)
    plan0 = make_mask_plan(64, 96, 0.0, 1)
    same_mask = apply_local_mask(TokenGrid(Tensor(tokens), (4, 4, 4), (1, 1, 1)),
                                 plan0).tokens.data.tobytes() == tokens.tobytes()
    vol = Volume(rng.random((32, 32, 32)), "CT")
    ident = DisruptionConfig(noise_sigma=0.0, downsample_ratio=1.0)
    same_disrupt = disrupt(vol, ident, rng).voxels.tobytes() == vol.voxels.tobytes()

    zeros = Volume(np.zeros((64, 64, 64)), "CT")
    noise = add_noise(zeros, 0.0, 0.1, np.random.default_rng(7)).voxels
    std_err = abs(float(noise.std()) - 0.1) / 0.1

    const_err = max(
        float(np.abs(down_up(Volume(np.full((32, 32, 32), v), "CT"), eps).voxels - v).max())
        for v in (0.0, 0.25, 1.0) for eps in (1, 2, 3, 4, 8))
    id_err = float(np.abs(down_up(vol, 1).voxels - vol.voxels).max())
    elapsed = time.perf_counter() - t0
    ok = (exact and same_mask and same_disrupt and std_err < 0.05 and const_err <= 1e-6
          and id_err <= 1e-6 and elapsed < 60)
    assert record(2, ok, f"mask counts exact={exact}; r=0 identity={same_mask}; "
                         f"sigma=0,eps=1 identity={same_disrupt}; noise std rel err "
                         f"{std_err:.4f} on {noise.size} voxels; constant err {const_err:.1e}; "
                         f"eps=1 err {id_err:.1e}; {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_losses():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    additive = True
    for _ in range(50):
        b = int(rng.integers(2, 6))
        recon = Tensor(rng.random((b, 8, 8, 8)).astype(np.float32))
        z = l2_normalize(Tensor(rng.normal(size=(b, 16)).astype(np.float32)))
        mods = list(rng.choice(MODALITIES, size=b))
        total, l1, cm = pretrain_loss(recon, rng.random((b, 8, 8, 8)), z, mods)
        additive &= bool(total.data == l1.data + cm.data)

    perm_err = 0.0
    with float64_mode():
        for _ in range(50):
            b = int(rng.integers(2, 8))
            z = rng.normal(size=(b, 16))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            mods = list(rng.choice(MODALITIES, size=b))
            p = rng.permutation(b)
            a = cmcl_loss(similarity(z), label_matrix(mods)).item()
            q = cmcl_loss(similarity(z[p]), label_matrix([mods[i] for i in p])).item()
            perm_err = max(perm_err, abs(a - q) / abs(a))

    labels_ok = True
    pool = ["CT", "T1", "T2", "FLAIR"]
    for b in range(1, 5):
        for mods in itertools.product(pool, repeat=b):
            brute = [[float(mods[i] == mods[j]) for j in range(b)] for i in range(b)]
            labels_ok &= label_matrix(list(mods)).tolist() == brute

    gt = rng.integers(0, 3, size=(2, 16, 16, 16))
    perfect = dice_loss(np.moveaxis(np.eye(3)[gt], -1, 1), gt).item()
    elapsed = time.perf_counter() - t0
    ok = additive and perm_err < 1e-12 and labels_ok and perfect <= 1e-4 and elapsed < 60
    assert record(3, ok, f"total==l1+cmcl bit-exact={additive}; permutation rel err "
                         f"{perm_err:.1e}; label matrix brute force B<=4 ok={labels_ok}; "
                         f"perfect Dice loss {perfect:.1e}; {elapsed:.1f}s")


# -- 4 ------------------------------------------------------------------------


def _adamw_trajectory(p0, grads, lrs, wd):
    p = Tensor(np.array([p0]), requires_grad=True, dtype=np.float64)
    opt = AdamW({"w": p}, weight_decay=wd)
    for g, lr in zip(grads, lrs):
        p.grad = np.array([g])
        opt.step(lr)
    return float(p.data[0])


def test_criterion_4_schedule_and_optimizer():
    t0 = time.perf_counter()
    lrs = [lr_schedule(s, 4e-4, 500, 2000) for s in range(1, 2001)]
    sched_err = max(abs(lr_schedule(0, 4e-4, 500, 2000)),
                    abs(lr_schedule(500, 4e-4, 500, 2000) - 4e-4),
                    abs(lr_schedule(2000, 4e-4, 500, 2000)))
    eps = 1e-8
    # constant unit gradient: bias-corrected m/sqrt(v) is 1 every step
    e1 = abs(_adamw_trajectory(0.5, [1.0] * 2000, lrs, 0.0) - (0.5 - sum(lrs) / (1 + eps)))
    # zero gradient: pure decoupled decay
    e2 = abs(_adamw_trajectory(0.5, [0.0] * 2000, lrs, 1e-1)
             - 0.5 * math.prod(1 - lr * 1e-1 for lr in lrs))
    # constant gradient c with decay: p <- p(1 - lr wd) - lr c / (|c| + eps)
    p, c, wd = -1.25, -3.0, 1e-2
    for lr in lrs:
        p = p * (1 - lr * wd) - lr * c / (abs(c) + eps)
    e3 = abs(_adamw_trajectory(-1.25, [c] * 2000, lrs, wd) - p)
    adam_err = max(e1, e2, e3)
    elapsed = time.perf_counter() - t0
    ok = sched_err <= 1e-12 and adam_err <= 1e-10 and elapsed < 10
    assert record(4, ok, f"schedule max err {sched_err:.1e}; AdamW closed-form max err "
                         f"{adam_err:.1e}; {elapsed:.1f}s")


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_pretraining(corpus, pretrain_run, tmp_path):
    run, first = pretrain_run
    m = read_metrics(run.metrics_path)
    l1 = smooth(m["loss_l1"], WINDOW)
    cmcl = smooth(m["loss_cmcl"], WINDOW)
    ratio = l1[-1] / l1[9]
    cmcl_first, cmcl_last = cmcl[WINDOW - 1], cmcl[-1]

    t0 = time.perf_counter()
    rerun = pretrain(corpus, ModelConfig(), DisruptionConfig(), PRETRAIN, tmp_path / "b")
    second = time.perf_counter() - t0
    same = rerun.metrics_path.read_bytes() == run.metrics_path.read_bytes()
    total = first + second
    ok = ratio < 0.5 and cmcl_last < cmcl_first and same and total < 1800
    assert record(5, ok, f"smoothed L1 step10 {l1[9]:.4f} -> step2000 {l1[-1]:.4f} "
                         f"(ratio {ratio:.3f}); CMCL first-window {cmcl_first:.5f} -> "
                         f"last-window {cmcl_last:.5f}; rerun byte-identical={same}; "
                         f"{first:.0f}s + {second:.0f}s")


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_finetune_direction(finetune_runs):
    runs, elapsed = finetune_runs
    dae = [runs["dae", s].val_dice for s in SEEDS]
    scratch = [runs["scratch", s].val_dice for s in SEEDS]
    ok = np.mean(dae) >= np.mean(scratch) and elapsed < 2700
    assert record(6, ok, f"val Dice pretrained {np.round(dae, 4).tolist()} mean "
                         f"{np.mean(dae):.4f} vs scratch {np.round(scratch, 4).tolist()} mean "
                         f"{np.mean(scratch):.4f}; {elapsed:.0f}s")


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_cka(corpus, pretrain_run, finetune_runs):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(50, 24)), rng.normal(size=(50, 24))
    q = ortho_group.rvs(24, random_state=7)
    self_err = abs(linear_cka(x, x) - 1.0)
    scale_err = abs(linear_cka(3.7 * x, y) - linear_cka(x, y))
    orth_err = max(abs(linear_cka(x @ q, y) - linear_cka(x, y)), abs(linear_cka(x, x @ q) - 1))

    pre, _ = load_model(pretrain_run[0].checkpoint_path)
    ft, _ = load_model(finetune_runs[0]["dae", SEEDS[0]].checkpoint_path)
    manifest = Manifest.load(corpus)
    probes = [center_crop(v.voxels, pre.config.crop) for _, v, _ in load_split(manifest, "val")]
    rows = stage_drift_report(pre, ft, probes)
    elapsed = time.perf_counter() - t0
    ordered = rows[0][1] > rows[-1][1]
    ok = max(self_err, scale_err, orth_err) <= 1e-6 and ordered and elapsed < 300
    stages = ", ".join(f"{s}:{v:.4f}" for s, v in rows)
    assert record(7, ok, f"self {self_err:.1e}, scale {scale_err:.1e}, orthogonal "
                         f"{orth_err:.1e}; stage CKA {stages}; stage1 > last={ordered}; "
                         f"{elapsed:.1f}s")


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_resume(corpus, pretrain_run, tmp_path):
    run, _ = pretrain_run
    k = 1800
    # an interrupted run: checkpoint at k on disk, metrics written past k
    out = tmp_path / "interrupted"
    (out / "checkpoints").mkdir(parents=True)
    ckpt = out / "checkpoints" / f"step_{k:06d}.daec"
    shutil.copy(run.metrics_path.parent / "checkpoints" / ckpt.name, ckpt)
    lines = run.metrics_path.read_text().splitlines(keepends=True)
    (out / "metrics.csv").write_text("".join(lines[: k + 1 + 37]) + lines[k + 38][:9])

    t0 = time.perf_counter()
    resumed = pretrain(corpus, ModelConfig(), DisruptionConfig(), PRETRAIN, out, resume=ckpt)
    elapsed = time.perf_counter() - t0
    new = resumed.metrics_path.read_text().splitlines()
    after_k = new[k + 1:] == [ln.rstrip("\n") for ln in lines[k + 1:]]
    whole = resumed.metrics_path.read_bytes() == run.metrics_path.read_bytes()
    weights = resumed.checkpoint_path.read_bytes() == run.checkpoint_path.read_bytes()
    ok = after_k and whole and weights and elapsed < 300
    assert record(8, ok, f"resumed at step {k}: rows {k + 1}..2000 identical={after_k}; whole "
                         f"CSV byte-identical={whole}; final weights identical={weights}; "
                         f"{elapsed:.0f}s")
