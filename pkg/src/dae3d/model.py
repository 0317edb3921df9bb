"""A compact transformer autoencoder for 3D crops.

Crops are cut into non-overlapping patches, linearly embedded, passed through
pre-norm transformer blocks with full self-attention, and mapped back to
voxels by a per-token linear decoder. A pooled, L2-normalised latent feeds the
cross-modal contrastive loss; a per-voxel class head replaces the decoder for
segmentation fine-tuning.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .disruption import apply_local_mask, disrupt, make_mask_plan
from .tensor import Tensor
from .volume import Volume


@dataclass
class ModelConfig:
    patch: tuple = (4, 4, 4)
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    latent_dim: int = 64
    crop: tuple = (32, 32, 32)

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.crop = tuple(int(c) for c in self.crop)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if any(c % p for c, p in zip(self.crop, self.patch)):
            raise ValueError(f"crop {self.crop} is not divisible by patch {self.patch}")

    @property
    def grid(self):
        return tuple(c // p for c, p in zip(self.crop, self.patch))

    @property
    def n_tokens(self):
        gd, gh, gw = self.grid
        return gd * gh * gw

    @property
    def patch_voxels(self):
        pd, ph, pw = self.patch
        return pd * ph * pw

    def to_vector(self):
        return np.array(
            [*self.patch, self.embed_dim, self.depth, self.heads, self.mlp_ratio,
             self.latent_dim, *self.crop],
            dtype=np.float32,
        )

    @classmethod
    def from_vector(cls, v):
        v = [int(x) for x in v]
        return cls(patch=tuple(v[0:3]), embed_dim=v[3], depth=v[4], heads=v[5],
                   mlp_ratio=v[6], latent_dim=v[7], crop=tuple(v[8:11]))


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, N, C)
    grid: tuple
    patch: tuple
    stages: list = field(default_factory=list, repr=False)

    @property
    def n_tokens(self):
        return self.tokens.shape[-2]

    @property
    def channels(self):
        return self.tokens.shape[-1]


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def patchify(x, patch):
    """(B, D, H, W) -> (B, N, pd*ph*pw), tokens in (d, h, w) raster order."""
    b, d, h, w = x.shape
    pd, ph, pw = patch
    gd, gh, gw = d // pd, h // ph, w // pw
    x = x.reshape(b, gd, pd, gh, ph, gw, pw).transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, gd * gh * gw, pd * ph * pw)


def unpatchify(t, grid, patch, channels=1):
    """Inverse of :func:`patchify`; with ``channels > 1`` returns (B, K, D, H, W)."""
    b = t.shape[0]
    gd, gh, gw = grid
    pd, ph, pw = patch
    if channels == 1:
        x = t.reshape(b, gd, gh, gw, pd, ph, pw).transpose(0, 1, 4, 2, 5, 3, 6)
        return x.reshape(b, gd * pd, gh * ph, gw * pw)
    x = t.reshape(b, gd, gh, gw, pd, ph, pw, channels).transpose(0, 7, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, channels, gd * pd, gh * ph, gw * pw)


def l2_normalize(x, eps=1e-24):
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


class DaeModel:
    def __init__(self, config=None, seed=0, dtype=np.float32, init_std=0.02):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.num_classes = 0
        rng = np.random.default_rng(seed)
        cfg = self.config
        c, p = cfg.embed_dim, cfg.patch_voxels
        hidden = cfg.mlp_ratio * c

        def trunc_normal(rng, shape):
            return _trunc_normal(rng, shape, std=init_std)

        self._add("patch_embed.weight", trunc_normal(rng, (p, c)))
        self._add("patch_embed.bias", np.zeros(c))
        self._add("pos_embed", np.zeros((cfg.n_tokens, c)))
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            self._add(pre + "norm1.gamma", np.ones(c))
            self._add(pre + "norm1.beta", np.zeros(c))
            for proj in ("q", "k", "v", "proj"):
                self._add(pre + f"attn.{proj}.weight", trunc_normal(rng, (c, c)))
                self._add(pre + f"attn.{proj}.bias", np.zeros(c))
            self._add(pre + "norm2.gamma", np.ones(c))
            self._add(pre + "norm2.beta", np.zeros(c))
            self._add(pre + "mlp.fc1.weight", trunc_normal(rng, (c, hidden)))
            self._add(pre + "mlp.fc1.bias", np.zeros(hidden))
            self._add(pre + "mlp.fc2.weight", trunc_normal(rng, (hidden, c)))
            self._add(pre + "mlp.fc2.bias", np.zeros(c))
        self._add("decoder.weight", trunc_normal(rng, (c, p)))
        self._add("decoder.bias", np.zeros(p))
        self._add("latent.weight", trunc_normal(rng, (c, cfg.latent_dim)))
        self._add("latent.bias", np.zeros(cfg.latent_dim))

    def _add(self, name, value):
        self.params[name] = T.parameter(np.asarray(value, dtype=self.dtype), name=name)

    def __getitem__(self, name):
        return self.params[name]

    # -- bookkeeping ---------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state, strict=True):
        missing = [k for k in self.params if k not in state]
        unexpected = [k for k in state if k not in self.params]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for k, v in state.items():
            if k not in self.params:
                continue
            if tuple(v.shape) != self.params[k].shape:
                raise ValueError(f"{k}: shape {tuple(v.shape)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def copy(self, dtype=None):
        other = DaeModel.__new__(DaeModel)
        other.config = self.config
        other.dtype = np.dtype(dtype or self.dtype)
        other.num_classes = self.num_classes
        other.params = OrderedDict(
            (k, T.parameter(v.data.astype(other.dtype), name=k)) for k, v in self.params.items()
        )
        return other

    def architecture_hash(self):
        """Digest of the backbone layout, ignoring the task heads."""
        h = hashlib.sha256(repr(asdict(self.config)).encode())
        for k, v in self.params.items():
            if not k.startswith(("decoder.", "seg_head.", "latent.")):
                h.update(f"{k}:{v.shape};".encode())
        return h.hexdigest()[:16]

    def set_pseudo_inverse_decoder(self):
        """Make the decoder undo the patch embedding (exact when depth is 0)."""
        w = self["patch_embed.weight"].data.astype(np.float64)
        b = self["patch_embed.bias"].data.astype(np.float64)
        pinv = np.linalg.pinv(w)
        self["decoder.weight"].data = pinv.astype(self.dtype)
        self["decoder.bias"].data = (-b @ pinv).astype(self.dtype)

    def add_segmentation_head(self, num_classes, seed=0):
        """Swap the reconstruction decoder for a per-voxel ``num_classes`` head."""
        rng = np.random.default_rng(seed)
        c, p = self.config.embed_dim, self.config.patch_voxels
        for k in ("decoder.weight", "decoder.bias", "latent.weight", "latent.bias"):
            self.params.pop(k, None)
        self._add("seg_head.weight", _trunc_normal(rng, (c, p * num_classes)))
        self._add("seg_head.bias", np.zeros(p * num_classes))
        self.num_classes = num_classes

    # -- forward pieces ------------------------------------------------

    def _as_batch(self, x):
        if isinstance(x, Volume):
            x = x.voxels
        if isinstance(x, (list, tuple)):
            x = np.stack([v.voxels if isinstance(v, Volume) else v for v in x])
        if isinstance(x, Tensor):
            return x if x.ndim == 4 else x.reshape(1, *x.shape)
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        return Tensor(x, dtype=self.dtype)

    def tokenize(self, x):
        cfg = self.config
        x = self._as_batch(x)
        if tuple(x.shape[1:]) != cfg.crop:
            if any(n % p for n, p in zip(x.shape[1:], cfg.patch)):
                raise ValueError(f"crop {tuple(x.shape[1:])} not divisible by patch {cfg.patch}")
            raise ValueError(f"crop {tuple(x.shape[1:])} does not match model crop {cfg.crop}")
        patches = patchify(x, cfg.patch)
        tokens = patches @ self["patch_embed.weight"] + self["patch_embed.bias"] + self["pos_embed"]
        return TokenGrid(tokens, cfg.grid, cfg.patch)

    def _block(self, x, i):
        pre = f"blocks.{i}."
        p = self.params
        b, n, c = x.shape
        heads = self.config.heads
        dh = c // heads

        h = T.layer_norm(x, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])

        def split(t):
            return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

        q = split(h @ p[pre + "attn.q.weight"] + p[pre + "attn.q.bias"])
        k = split(h @ p[pre + "attn.k.weight"] + p[pre + "attn.k.bias"])
        v = split(h @ p[pre + "attn.v.weight"] + p[pre + "attn.v.bias"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        x = x + (out @ p[pre + "attn.proj.weight"] + p[pre + "attn.proj.bias"])

        h = T.layer_norm(x, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
        h = T.gelu(h @ p[pre + "mlp.fc1.weight"] + p[pre + "mlp.fc1.bias"])
        return x + (h @ p[pre + "mlp.fc2.weight"] + p[pre + "mlp.fc2.bias"])

    def encode(self, tg, keep_stages=False):
        x = tg.tokens
        stages = [x] if keep_stages else []
        for i in range(self.config.depth):
            x = self._block(x, i)
            if keep_stages:
                stages.append(x)
        return TokenGrid(x, tg.grid, tg.patch, stages)

    def decode(self, tg):
        out = tg.tokens @ self["decoder.weight"] + self["decoder.bias"]
        return unpatchify(out, tg.grid, tg.patch)

    def latent(self, tg):
        pooled = tg.tokens.mean(axis=-2)
        return l2_normalize(pooled @ self["latent.weight"] + self["latent.bias"])

    def segment(self, tg):
        """Class probabilities, shape (B, K, D, H, W)."""
        logits = tg.tokens @ self["seg_head.weight"] + self["seg_head.bias"]
        logits = unpatchify(logits, tg.grid, tg.patch, channels=self.num_classes)
        return T.softmax(logits, axis=1)

    def stage_features(self, x):
        """Token-mean-pooled features after the embedding and after each block."""
        enc = self.encode(self.tokenize(x), keep_stages=True)
        return [s.data.mean(axis=-2) for s in enc.stages]


def sample_seeds(cfg_seed, index, step):
    """Independent (noise, mask) seeds for one batch element at one step."""
    ss = np.random.SeedSequence((int(cfg_seed) ^ int(index), int(step)))
    noise_seed, mask_seed = ss.generate_state(2, dtype=np.uint64)
    return int(noise_seed), int(mask_seed)


def disrupt_batch(volumes, cfg, step=0):
    """Apply noise and resampling to each crop; returns (stacked voxels, mask seeds)."""
    out, mask_seeds = [], []
    for i, vol in enumerate(volumes):
        noise_seed, mask_seed = sample_seeds(cfg.seed, i, step)
        out.append(disrupt(vol, cfg, np.random.default_rng(noise_seed)).voxels)
        mask_seeds.append(mask_seed)
    return np.stack(out), mask_seeds


def forward(volumes, cfg, model, step=0):
    """Disrupt, tokenize, mask, encode; returns (reconstruction, latent, mask plans).

    ``volumes`` is a list of clean crops. The reconstruction target is the
    clean input, not the disrupted one.
    """
    if isinstance(volumes, Volume):
        volumes = [volumes]
    disrupted, mask_seeds = disrupt_batch(volumes, cfg, step)
    tg = model.tokenize(disrupted)
    plans = [
        make_mask_plan(tg.n_tokens, tg.channels, cfg.mask_ratio, s, cfg.mask_shared_channels)
        for s in mask_seeds
    ]
    tg = apply_local_mask(tg, plans)
    enc = model.encode(tg)
    return model.decode(enc), model.latent(enc), plans
