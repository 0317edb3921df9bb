"""
Three ways to damage a volume
=============================

Noise and down/up-sampling act on voxels; local masking acts on token
channels after the patch embedding.
"""

import numpy as np

from dae3d.disruption import (DisruptionConfig, add_noise, apply_local_mask, down_up,
                              make_mask_plan)
from dae3d.model import DaeModel, ModelConfig
from dae3d.volume import synth_volume

vol, labels = synth_volume(seed=3, modality="SYNTH_A", dims=(32, 32, 32))
print("phantom", vol.dims, "range", vol.intensity_range, "foreground voxels", (labels > 0).sum())

rng = np.random.default_rng(0)
noisy = add_noise(vol, mu=0.0, sigma=0.1, rng=rng)
print("noise std", float((noisy.voxels - vol.voxels).std()))

# resampling loses detail but keeps smooth structure
for eps in (1, 2, 4, 8):
    out = down_up(vol, eps)
    print(f"eps={eps}: mean |x - down_up(x)| = {np.abs(out.voxels - vol.voxels).mean():.4f}")

# masking zeroes floor(r*C) channels in every token
model = DaeModel(ModelConfig())
tokens = model.tokenize(vol)
plan = make_mask_plan(tokens.n_tokens, tokens.channels, 0.6, seed=1)
masked = apply_local_mask(tokens, plan)
print("tokens", tokens.tokens.shape, "masked channels per token", set(plan.to_mask().sum(1).tolist()))
kept = masked.tokens.data[0][~plan.to_mask()]
print("unmasked entries untouched:", np.array_equal(kept, tokens.tokens.data[0][~plan.to_mask()]))

print(DisruptionConfig())
