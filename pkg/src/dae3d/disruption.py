"""Input disruptions: additive Gaussian noise, down/up-sampling and local masking."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .tensor import mask_zero

COMPOSITION = "noise,downsample"


@dataclass
class DisruptionConfig:
    noise_mu: float = 0.0
    noise_sigma: float = 0.1
    downsample_ratio: float = 4.0
    mask_ratio: float = 0.6
    seed: int = 0
    mask_shared_channels: bool = False
    # noise is applied first, then resampling
    order: str = COMPOSITION

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.downsample_ratio < 1:
            raise ValueError(f"downsample_ratio must be >= 1, got {self.downsample_ratio}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.order != COMPOSITION:
            raise ValueError(f"unsupported disruption order {self.order!r}")

    @classmethod
    def identity(cls, seed=0):
        return cls(noise_sigma=0.0, downsample_ratio=1.0, mask_ratio=0.0, seed=seed)


def add_noise(volume, mu, sigma, rng):
    """x + n with n ~ N(mu, sigma^2) i.i.d. per voxel; no clipping."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    noise = rng.normal(mu, sigma, size=volume.dims)
    return volume.with_voxels((volume.voxels + noise).astype(np.float32))


def _resize_axis(a, axis, n_out):
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    return lo + (hi - lo) * w


def resize_trilinear(voxels, dims):
    """Separable trilinear resampling with half-voxel centres and edge clamping."""
    out = np.asarray(voxels, dtype=np.float64)
    for axis, n in enumerate(dims):
        out = _resize_axis(out, axis, int(n))
    return out


def down_up(volume, epsilon):
    """Downsample by ``epsilon`` with trilinear interpolation, then restore the grid."""
    if epsilon < 1:
        raise ValueError(f"downsampling ratio must be >= 1, got {epsilon}")
    if any(n < epsilon for n in volume.dims):
        raise ValueError(f"volume {volume.dims} is smaller than ratio {epsilon}")
    if epsilon == 1:
        return volume.with_voxels(volume.voxels.copy())
    low = tuple(max(1, math.floor(n / epsilon)) for n in volume.dims)
    small = resize_trilinear(volume.voxels, low)
    return volume.with_voxels(resize_trilinear(small, volume.dims).astype(np.float32))


def disrupt(volume, cfg, rng):
    """Noise followed by down/up-sampling. Local masking happens after tokenization."""
    noisy = volume
    if cfg.noise_sigma > 0 or cfg.noise_mu != 0:
        noisy = add_noise(volume, cfg.noise_mu, cfg.noise_sigma, rng)
    return down_up(noisy, cfg.downsample_ratio)


# -- local masking ----------------------------------------------------------


@dataclass
class MaskPlan:
    token_count: int
    channel_count: int
    masked: np.ndarray  # (N, k) sorted channel indices per token
    seed: int
    shared: bool = False

    @property
    def per_token(self):
        return self.masked.shape[1]

    def to_mask(self):
        mask = np.zeros((self.token_count, self.channel_count), dtype=bool)
        np.put_along_axis(mask, self.masked, True, axis=1)
        return mask


def mask_count(channels, ratio):
    return math.floor(ratio * channels)


def make_mask_plan(n_tokens, channels, ratio, seed, shared=False):
    """Pick ``floor(ratio * channels)`` channels to zero for every token.

    Each token draws its own uniform subset unless ``shared`` is set, in which
    case one subset is reused for all tokens.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    k = mask_count(channels, ratio)
    rng = np.random.default_rng(seed)
    rows = 1 if shared else n_tokens
    order = np.argsort(rng.random((rows, channels)), axis=1, kind="stable")[:, :k]
    masked = np.sort(order, axis=1)
    if shared:
        masked = np.repeat(masked, n_tokens, axis=0)
    return MaskPlan(n_tokens, channels, masked.astype(np.int64), seed, shared)


def apply_local_mask(tokens, plan):
    """Zero the planned (token, channel) entries of a token grid.

    ``plan`` may be a single plan or one plan per batch element when the
    tokens carry a leading batch axis.
    """
    t = tokens.tokens
    plans = plan if isinstance(plan, (list, tuple)) else [plan]
    for p in plans:
        if t.shape[-2:] != (p.token_count, p.channel_count):
            raise ValueError(
                f"mask plan ({p.token_count}, {p.channel_count}) does not match tokens {t.shape}"
            )
    if all(p.per_token == 0 for p in plans):
        return tokens
    if t.ndim == 2:
        if len(plans) != 1:
            raise ValueError("unbatched tokens take exactly one mask plan")
        mask = plans[0].to_mask()
    else:
        if len(plans) == 1:
            plans = plans * t.shape[0]
        if len(plans) != t.shape[0]:
            raise ValueError(f"got {len(plans)} mask plans for batch of {t.shape[0]}")
        mask = np.stack([p.to_mask() for p in plans])
    return dataclasses.replace(tokens, tokens=mask_zero(t, mask))
