"""Deterministic pre-training and fine-tuning loops.

All randomness in a step is drawn from generators seeded by ``(seed, step)``,
so a run resumed from a checkpoint replays exactly the same batches,
noise fields and mask plans as an uninterrupted one.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import CMCL_ALPHA, DICE_SMOOTH, TEMPERATURE, dice_loss, dice_score, pretrain_loss
from .model import DaeModel, ModelConfig, forward
from .optim import AdamW, NumericError, clip_grad_norm, lr_schedule
from .volume import Manifest, load_labels, load_volume, random_crop

log = logging.getLogger(__name__)

PRETRAIN_HEADER = "step,lr,loss_total,loss_l1,loss_cmcl"
FINETUNE_HEADER = "step,lr,loss_dice,val_dice"


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_iters: int = 500
    total_iters: int = 2000
    batch_size: int = 2
    seed: int = 0
    checkpoint_every: int = 500
    grad_clip_norm: float = 0.0
    cmcl_alpha: float = CMCL_ALPHA
    cmcl_temperature: float = TEMPERATURE
    dice_smooth: float = DICE_SMOOTH

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError(
                f"warmup_iters {self.warmup_iters} exceeds total_iters {self.total_iters}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_run_config(cls, cfg, finetune=False):
        return cls(
            lr=cfg["lr"], weight_decay=cfg["weight_decay"], beta1=cfg["beta1"],
            beta2=cfg["beta2"],
            warmup_iters=cfg["finetune_warmup"] if finetune else cfg["warmup_iters"],
            total_iters=cfg["finetune_iters"] if finetune else cfg["total_iters"],
            batch_size=cfg["batch_size"], seed=cfg["seed"],
            checkpoint_every=cfg["checkpoint_every"], grad_clip_norm=cfg["grad_clip_norm"],
            cmcl_alpha=cfg["cmcl_alpha"], cmcl_temperature=cfg["cmcl_temperature"],
            dice_smooth=cfg["dice_smooth"],
        )


@dataclass
class RunResult:
    model: DaeModel
    metrics_path: Path
    checkpoint_path: Path
    rows: list = field(default_factory=list)
    val_dice: float = float("nan")


def fmt(x):
    return repr(float(x))


def step_rng(seed, step, stream=0):
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(step), int(stream))))


# -- data -------------------------------------------------------------------


def load_split(manifest, split, with_labels=False):
    out = []
    for entry in manifest.split(split):
        path = manifest.resolve(entry)
        vol = load_volume(path)
        labels = load_labels(path) if with_labels else None
        out.append((entry, vol, labels))
    return out


def sample_pretrain_batch(pool, batch_size, crop, rng):
    """Pick a modality uniformly per slot, then a volume of it, then a crop."""
    modalities = sorted(pool)
    crops, tags = [], []
    for _ in range(batch_size):
        m = modalities[int(rng.integers(len(modalities)))]
        vol = pool[m][int(rng.integers(len(pool[m])))]
        crops.append(random_crop(vol, crop, rng))
        tags.append(m)
    return crops, tags


def collapse_labels(labels, num_classes):
    if num_classes == 2:
        return (labels > 0).astype(np.int64)
    return np.minimum(labels, num_classes - 1).astype(np.int64)


# -- checkpoints --------------------------------------------------------------


def model_tensors(model):
    tensors = model.state_dict()
    tensors["meta.model_config"] = model.config.to_vector()
    tensors["meta.num_classes"] = np.array(model.num_classes, dtype=np.float32)
    return tensors


def save_train_state(path, model, optimizer=None):
    save_checkpoint(path, model_tensors(model), optimizer.state() if optimizer else None)


def load_model(path, dtype=np.float32):
    """Rebuild a model (and return its optimizer state) from a DAEC file."""
    tensors, opt = load_checkpoint(path)
    cfg = ModelConfig.from_vector(tensors.pop("meta.model_config"))
    num_classes = int(tensors.pop("meta.num_classes", np.zeros(())))
    model = DaeModel(cfg, seed=0, dtype=dtype)
    if num_classes:
        model.add_segmentation_head(num_classes)
    model.load_state_dict(tensors)
    return model, opt


def _read_rows(path, keep):
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) <= keep]


# -- pre-training -------------------------------------------------------------


def pretrain(manifest, model_cfg, dis_cfg, train_cfg, out_dir, resume=None, stop_at=None):
    """Pre-train on the manifest's train split.

    Writes ``metrics.csv``, periodic ``checkpoints/step_XXXXXX.daec`` and a
    final ``model.daec`` under ``out_dir``. ``stop_at`` ends the run early
    (after checkpointing) to emulate an interruption.
    """
    if isinstance(manifest, (str, Path)):
        manifest = Manifest.load(manifest)
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    pool = {}
    for entry, vol, _ in load_split(manifest, "train"):
        pool.setdefault(entry.modality, []).append(vol)
    if not pool:
        raise ValueError("manifest has no train entries")
    if len(pool) < 2 and train_cfg.cmcl_alpha > 0:
        warnings.warn("single-modality corpus: contrastive labels are all ones", stacklevel=2)

    model = DaeModel(model_cfg, seed=train_cfg.seed)
    opt = AdamW(model.params, train_cfg.weight_decay, (train_cfg.beta1, train_cfg.beta2))
    start = 0
    if resume:
        loaded, opt_state = load_model(resume)
        model.load_state_dict(loaded.state_dict())
        opt.load_state(opt_state)
        start = opt.step_count
        log.info("resumed from %s at step %d", resume, start)

    metrics_path = out_dir / "metrics.csv"
    rows = _read_rows(metrics_path, start) if resume else []
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(PRETRAIN_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")
        f.flush()
        last = train_cfg.total_iters if stop_at is None else min(stop_at, train_cfg.total_iters)
        for step in range(start + 1, last + 1):
            rng = step_rng(train_cfg.seed, step)
            crops, tags = sample_pretrain_batch(pool, train_cfg.batch_size, model_cfg.crop, rng)
            target = np.stack([c.voxels for c in crops])
            recon, z, _ = forward(crops, dis_cfg, model, step=step)
            total, l1_part, cmcl_part = pretrain_loss(
                recon, target, z, tags, train_cfg.cmcl_alpha, train_cfg.cmcl_temperature
            )
            if not np.isfinite(total.item()):
                raise NumericError(f"non-finite loss at step {step}")
            model.zero_grad()
            T.backward(total)
            if train_cfg.grad_clip_norm > 0:
                clip_grad_norm(model.parameters(), train_cfg.grad_clip_norm)
            lr = lr_schedule(step, train_cfg.lr, train_cfg.warmup_iters, train_cfg.total_iters)
            opt.step(lr)
            row = ",".join(
                [str(step), fmt(lr), fmt(total.item()), fmt(l1_part.item()), fmt(cmcl_part.item())]
            )
            rows.append(row)
            f.write(row + "\n")
            if step % 100 == 0:
                f.flush()
                log.info("step %d loss %.5f l1 %.5f", step, total.item(), l1_part.item())
            if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_train_state(out_dir / "checkpoints" / f"step_{step:06d}.daec", model, opt)
        if last != train_cfg.total_iters and last > start:
            save_train_state(out_dir / "checkpoints" / f"step_{last:06d}.daec", model, opt)

    final = out_dir / "model.daec"
    if last == train_cfg.total_iters:
        save_train_state(final, model, opt)
    return RunResult(model, metrics_path, final, rows)


def read_metrics(path):
    """Parse a metrics CSV into a dict of column -> float array (blank -> nan)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for ln in lines[1:]:
        for h, v in zip(header, ln.split(",")):
            cols[h].append(float(v) if v else float("nan"))
    return {h: np.array(v) for h, v in cols.items()}


def smooth(values, window):
    """Trailing moving average; early entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- fine-tuning ----------------------------------------------------------------


def center_crop(array, size):
    offs = [(n - s) // 2 for n, s in zip(array.shape, size)]
    return array[tuple(slice(o, o + s) for o, s in zip(offs, size))]


def evaluate_dice(model, items, num_classes, batch=6):
    """Mean foreground hard Dice per validation volume (centre crops)."""
    crop = model.config.crop
    scores = []
    for i in range(0, len(items), batch):
        chunk = items[i : i + batch]
        x = np.stack([center_crop(v.voxels, crop) for _, v, _ in chunk])
        probs = model.segment(model.encode(model.tokenize(x))).data
        pred = probs.argmax(axis=1)
        for (entry, _, labels), p in zip(chunk, pred):
            gt = collapse_labels(center_crop(labels, crop), num_classes)
            per_class = dice_score(p, gt, num_classes)
            scores.append((entry.path, float(per_class[1:].mean())))
    return scores


def finetune(manifest, pretrained, model_cfg, train_cfg, out_dir, num_classes=2, eval_every=100):
    """Train a per-voxel segmentation head with Dice loss.

    ``pretrained`` is a checkpoint path or ``None`` for random initialisation;
    either way the backbone architecture is identical.
    """
    if isinstance(manifest, (str, Path)):
        manifest = Manifest.load(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        train_items = load_split(manifest, "train", with_labels=True)
        val_items = load_split(manifest, "val", with_labels=True)
    except FileNotFoundError as exc:
        raise ValueError(f"fine-tuning needs label volumes: {exc}") from exc
    if not train_items or not val_items:
        raise ValueError("fine-tuning needs nonempty train and val splits")

    model = DaeModel(model_cfg, seed=train_cfg.seed)
    if pretrained:
        source, _ = load_model(pretrained)
        if source.config != model_cfg:
            raise ValueError(f"pre-trained config {source.config} != {model_cfg}")
        backbone = {k: v for k, v in source.state_dict().items()
                    if not k.startswith(("decoder.", "latent.", "seg_head."))}
        model.load_state_dict(backbone, strict=False)
    model.add_segmentation_head(num_classes, seed=train_cfg.seed + 1)
    opt = AdamW(model.params, train_cfg.weight_decay, (train_cfg.beta1, train_cfg.beta2))

    metrics_path = out_dir / "metrics.csv"
    rows = []
    val = float("nan")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(FINETUNE_HEADER + "\n")
        for step in range(1, train_cfg.total_iters + 1):
            rng = step_rng(train_cfg.seed, step, stream=1)
            xs, ys = [], []
            for _ in range(train_cfg.batch_size):
                _, vol, labels = train_items[int(rng.integers(len(train_items)))]
                c, lab = random_crop(vol, model_cfg.crop, rng, labels=labels)
                xs.append(c.voxels)
                ys.append(collapse_labels(lab, num_classes))
            probs = model.segment(model.encode(model.tokenize(np.stack(xs))))
            loss = dice_loss(probs, np.stack(ys), train_cfg.dice_smooth)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at step {step}")
            model.zero_grad()
            T.backward(loss)
            if train_cfg.grad_clip_norm > 0:
                clip_grad_norm(model.parameters(), train_cfg.grad_clip_norm)
            lr = lr_schedule(step, train_cfg.lr, train_cfg.warmup_iters, train_cfg.total_iters)
            opt.step(lr)
            evaluate = step == train_cfg.total_iters or (eval_every and step % eval_every == 0)
            val_field = ""
            if evaluate:
                scores = evaluate_dice(model, val_items, num_classes)
                val = float(np.mean([s for _, s in scores]))
                val_field = fmt(val)
            row = ",".join([str(step), fmt(lr), fmt(loss.item()), val_field])
            rows.append(row)
            f.write(row + "\n")

    final = out_dir / "model.daec"
    save_train_state(final, model)
    with open(out_dir / "dice.csv", "w", encoding="utf-8") as f:
        f.write("volume,dice\n")
        for name, s in scores:
            f.write(f"{name},{fmt(s)}\n")
        f.write(f"mean,{fmt(val)}\n")
    return RunResult(model, metrics_path, final, rows, val)
