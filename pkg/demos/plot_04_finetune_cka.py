"""
Fine-tuning and representation drift
====================================

Fine-tune a segmentation head from pre-trained and from random weights,
then measure how far each backbone stage moved with linear CKA.
"""

import tempfile
from pathlib import Path

import numpy as np

from dae3d.analysis import linear_cka, stage_drift_report
from dae3d.disruption import DisruptionConfig
from dae3d.model import ModelConfig
from dae3d.trainer import TrainConfig, center_crop, finetune, load_split, pretrain
from dae3d.volume import Manifest, synth_corpus

work = Path(tempfile.mkdtemp(prefix="dae3d_demo_"))
manifest = synth_corpus(work / "data", count=8, modalities=["SYNTH_A", "SYNTH_C"],
                        dims=(24, 24, 24), val_fraction=0.25)
cfg = ModelConfig(patch=(4, 4, 4), embed_dim=32, depth=2, heads=4, latent_dim=16,
                  crop=(16, 16, 16))

pre = pretrain(manifest, cfg, DisruptionConfig(downsample_ratio=2),
               TrainConfig(warmup_iters=20, total_iters=200, checkpoint_every=0), work / "pre")

ft_cfg = TrainConfig(warmup_iters=10, total_iters=100)
dae = finetune(manifest, pre.checkpoint_path, cfg, ft_cfg, work / "ft_dae", eval_every=25)
scratch = finetune(manifest, None, cfg, ft_cfg, work / "ft_scratch", eval_every=25)
print(f"val Dice: pretrained {dae.val_dice:.3f}, scratch {scratch.val_dice:.3f}")

probes = [center_crop(v.voxels, cfg.crop) for _, v, _ in load_split(Manifest.load(manifest), "val")]
for stage, value in stage_drift_report(pre.model, dae.model, probes):
    print(f"stage {stage}: CKA(pretrained, fine-tuned) = {value:.4f}")

# CKA ignores rotations and rescaling of the feature space
rng = np.random.default_rng(0)
x = rng.normal(size=(40, 8))
q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
print("CKA(x, 5 x Q) =", linear_cka(x, 5 * x @ q))
