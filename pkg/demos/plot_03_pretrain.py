"""
A short pre-training run
========================

Pre-train a small model on a synthetic three-modality corpus, then look at
the loss curves and reconstruction quality.
"""

import tempfile
from pathlib import Path

from dae3d.analysis import recon_report
from dae3d.disruption import DisruptionConfig
from dae3d.model import ModelConfig
from dae3d.trainer import TrainConfig, load_split, pretrain, read_metrics, smooth
from dae3d.volume import Manifest, synth_corpus

work = Path(tempfile.mkdtemp(prefix="dae3d_demo_"))
manifest = synth_corpus(work / "data", count=8, modalities=["SYNTH_A", "SYNTH_B", "SYNTH_C"],
                        dims=(24, 24, 24))

model_cfg = ModelConfig(patch=(4, 4, 4), embed_dim=32, depth=2, heads=4, latent_dim=16,
                        crop=(16, 16, 16))
dis_cfg = DisruptionConfig(downsample_ratio=2)
train_cfg = TrainConfig(warmup_iters=30, total_iters=300, checkpoint_every=100)

run = pretrain(manifest, model_cfg, dis_cfg, train_cfg, work / "pretrain")
m = read_metrics(run.metrics_path)
l1 = smooth(m["loss_l1"], 20)
cmcl = smooth(m["loss_cmcl"], 20)
for step in (10, 100, 200, 300):
    print(f"step {step:4d}  L1 {l1[step - 1]:.4f}  CMCL {cmcl[step - 1]:.5f}")

# reconstruct validation crops through the same disruption
vols = [(e.path, v) for e, v, _ in load_split(Manifest.load(manifest), "val")]
rows = recon_report(run.model, vols, dis_cfg)
print("mean L1 %.4f, PSNR %.1f dB" % rows[-1][1:])
print("outputs in", work)
