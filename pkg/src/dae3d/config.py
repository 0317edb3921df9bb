"""Run configuration: ``key = value`` documents with typed, documented keys."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .disruption import DisruptionConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _triple(text):
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ValueError(f"expected 1 or 3 integers, got {text!r}")
    return tuple(parts)


def _floats(text):
    return [float(p) for p in str(text).split(",") if p.strip()]


def _names(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    parse: object
    doc: str


KEYS = [
    Key("run_name", "run", str, "run directory name under out_dir"),
    Key("out_dir", "runs", str, "parent directory for all run outputs"),
    Key("seed", 0, int, "master seed for data sampling and weight init"),
    # data
    Key("manifest", "", str, "manifest path; empty means <run>/data/manifest.tsv"),
    Key("count", 30, int, "synth: phantoms per modality"),
    Key("modalities", "SYNTH_A,SYNTH_B,SYNTH_C", str, "synth: comma-separated modality tags"),
    Key("synth_dims", (40, 40, 40), _triple, "synth: phantom size, one or three integers"),
    Key("val_fraction", 0.2, float, "synth: fraction of phantoms assigned to the val split"),
    # disruption
    Key("noise_mu", 0.0, float, "mean of the additive Gaussian noise"),
    Key("noise_sigma", 0.1, float, "std of the additive Gaussian noise"),
    Key("downsample_ratio", 4.0, float, "down/up-sampling factor (>= 1)"),
    Key("mask_ratio", 0.6, float, "fraction of embedding channels zeroed per token"),
    Key("disruption_seed", 0, int, "seed for noise fields and mask plans"),
    Key("mask_shared_channels", False, _bool, "reuse one channel subset for every token"),
    # model
    Key("patch", (4, 4, 4), _triple, "patch extents"),
    Key("embed_dim", 96, int, "token embedding width C"),
    Key("depth", 4, int, "number of transformer blocks"),
    Key("heads", 4, int, "attention heads"),
    Key("mlp_ratio", 4, int, "MLP hidden width as a multiple of embed_dim"),
    Key("latent_dim", 64, int, "width of the contrastive latent"),
    Key("crop", (32, 32, 32), _triple, "training crop extents"),
    # losses
    Key("cmcl_alpha", 0.05, float, "scale of the cross-modal contrastive term"),
    Key("cmcl_temperature", 0.07, float, "t in the exp(t) similarity scale"),
    Key("dice_smooth", 1e-5, float, "Dice smoothing constant"),
    # optimisation
    Key("lr", 4e-4, float, "peak learning rate"),
    Key("weight_decay", 1e-5, float, "decoupled AdamW weight decay"),
    Key("beta1", 0.9, float, "AdamW first-moment decay"),
    Key("beta2", 0.999, float, "AdamW second-moment decay"),
    Key("warmup_iters", 500, int, "linear warm-up steps"),
    Key("total_iters", 2000, int, "pre-training steps"),
    Key("batch_size", 2, int, "crops per step"),
    Key("checkpoint_every", 500, int, "pre-training checkpoint interval in steps"),
    Key("grad_clip_norm", 0.0, float, "global gradient-norm clip; 0 disables"),
    Key("resume", "", str, "pretrain: checkpoint to resume from"),
    # fine-tuning
    Key("pretrained", "", str, "finetune: pre-trained checkpoint; empty trains from scratch"),
    Key("num_classes", 2, int, "finetune: segmentation classes including background"),
    Key("finetune_iters", 1000, int, "finetune: training steps"),
    Key("finetune_warmup", 50, int, "finetune: warm-up steps"),
    Key("eval_every", 100, int, "finetune: validation interval in steps"),
    # analysis
    Key("checkpoint", "", str, "reconstruct/cka: model checkpoint (default: run's pretrain)"),
    Key("finetuned", "", str, "cka: fine-tuned checkpoint (default: run's finetune)"),
    Key("probe_split", "val", str, "split used for reconstruction and CKA probes"),
    Key("dump_triplets", False, _bool, "reconstruct: write input/disrupted/output DVOL files"),
    Key("sweep_r", [0.0, 0.3, 0.6, 0.9], _floats, "sweep: masking ratios"),
    Key("sweep_iters", 100, int, "sweep: pre-training steps per ratio"),
    Key("smooth_window", 20, int, "trailing window for smoothed losses"),
    Key("gradcheck_seeds", 20, int, "gradcheck: number of random seeds"),
]
KEY_MAP = {k.name: k for k in KEYS}


def defaults():
    return {k.name: k.default for k in KEYS}


def parse_document(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def coerce(raw):
    unknown = sorted(set(raw) - set(KEY_MAP))
    if unknown:
        valid = ", ".join(k.name for k in KEYS)
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {valid}")
    out = defaults()
    for key, value in raw.items():
        if isinstance(value, str):
            try:
                value = KEY_MAP[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        out[key] = value
    return out


def load_config(path=None, overrides=()):
    """File values, then ``key=value`` overrides (which win)."""
    raw = {}
    if path:
        raw.update(parse_document(Path(path).read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return coerce(raw)


def dump_config(cfg):
    lines = []
    for k in KEYS:
        v = cfg[k.name]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k.name} = {v}")
    return "\n".join(lines) + "\n"


def describe_keys():
    width = max(len(k.name) for k in KEYS)
    rows = []
    for k in KEYS:
        d = k.default
        if isinstance(d, (tuple, list)):
            d = ",".join(str(x) for x in d)
        rows.append(f"  {k.name:<{width}}  {d!s:<24} {k.doc}")
    return "\n".join(rows)


def model_config(cfg):
    return ModelConfig(patch=cfg["patch"], embed_dim=cfg["embed_dim"], depth=cfg["depth"],
                       heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"],
                       latent_dim=cfg["latent_dim"], crop=cfg["crop"])


def disruption_config(cfg):
    return DisruptionConfig(noise_mu=cfg["noise_mu"], noise_sigma=cfg["noise_sigma"],
                            downsample_ratio=cfg["downsample_ratio"],
                            mask_ratio=cfg["mask_ratio"], seed=cfg["disruption_seed"],
                            mask_shared_channels=cfg["mask_shared_channels"])


def run_dir(cfg):
    return Path(cfg["out_dir"]) / cfg["run_name"]


def manifest_path(cfg):
    return Path(cfg["manifest"]) if cfg["manifest"] else run_dir(cfg) / "data" / "manifest.tsv"
