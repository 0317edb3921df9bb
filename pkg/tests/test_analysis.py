import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from dae3d.analysis import linear_cka, mask_sweep, psnr, recon_report, stage_drift_report
from dae3d.disruption import DisruptionConfig
from dae3d.model import DaeModel, ModelConfig
from dae3d.trainer import TrainConfig
from dae3d.volume import Volume

SMALL = ModelConfig(patch=(2, 2, 2), embed_dim=8, depth=2, heads=2, mlp_ratio=2, latent_dim=4,
                    crop=(8, 8, 8))


def features(seed, n=20, p=6):
    return np.random.default_rng(seed).normal(size=(n, p))


def brute_cka(x, y):
    """Gram-matrix definition with an explicit centering matrix."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = h @ x @ x.T @ h, h @ y @ y.T @ h
    return np.sum(k * l) / (np.linalg.norm(k) * np.linalg.norm(l))


class TestCka:
    def test_self_similarity(self):
        assert abs(linear_cka(features(0), features(0)) - 1.0) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, scale):
        x, y = features(seed), features(seed + 1)
        assert abs(linear_cka(x * scale, y) - linear_cka(x, y)) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_orthogonal_invariance(self, seed):
        x, y = features(seed), features(seed + 1)
        q = ortho_group.rvs(6, random_state=seed)
        assert abs(linear_cka(x @ q, y) - linear_cka(x, y)) < 1e-6
        assert abs(linear_cka(x, x @ q) - 1.0) < 1e-6

    @pytest.mark.parametrize("p,q", [(3, 4), (30, 5), (40, 50)])
    def test_matches_brute_force(self, p, q):
        x = features(1, n=12, p=p)
        y = features(2, n=12, p=q)
        assert linear_cka(x, y) == pytest.approx(brute_cka(x, y), abs=1e-12)

    def test_bounded(self):
        v = linear_cka(features(3), features(4))
        assert 0.0 <= v <= 1.0

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="variance"):
            linear_cka(np.ones((5, 3)), features(0, n=5))

    def test_sample_mismatch(self):
        with pytest.raises(ValueError):
            linear_cka(features(0, n=5), features(0, n=6))


def probes(n=6):
    rng = np.random.default_rng(0)
    return [rng.random((8, 8, 8)).astype(np.float32) for _ in range(n)]


def test_stage_drift_identical_models():
    m = DaeModel(SMALL, seed=0, init_std=0.3)
    rows = stage_drift_report(m, m.copy(), probes())
    assert [s for s, _ in rows] == [1, 2, 3]
    for _, v in rows:
        assert abs(v - 1.0) < 1e-6


def test_stage_drift_architecture_mismatch():
    a = DaeModel(SMALL)
    b = DaeModel(ModelConfig(patch=(2, 2, 2), embed_dim=8, depth=1, heads=2, mlp_ratio=2,
                             latent_dim=4, crop=(8, 8, 8)))
    with pytest.raises(ValueError):
        stage_drift_report(a, b, probes())


def test_psnr():
    assert psnr(0.0) == math.inf
    assert psnr(0.01) == pytest.approx(20.0)


def test_identity_oracle_psnr(tmp_path):
    cfg = ModelConfig(patch=(2, 2, 2), embed_dim=16, depth=0, heads=2, latent_dim=4, crop=(8, 8, 8))
    m = DaeModel(cfg, seed=0, init_std=0.3)
    m.set_pseudo_inverse_decoder()
    vols = [(f"v{i}", Volume(p, "CT")) for i, p in enumerate(probes(3))]
    rows = recon_report(m, vols, DisruptionConfig.identity(), dump_dir=tmp_path)
    assert rows[-1][0] == "mean" and len(rows) == 4
    for _, l1, p in rows:
        assert p > 60
    assert len(list(tmp_path.glob("*.dvol"))) == 9


def test_mask_sweep(tiny_corpus, tmp_path):
    cfg = ModelConfig(patch=(4, 4, 4), embed_dim=8, depth=1, heads=2, mlp_ratio=2, latent_dim=4,
                      crop=(8, 8, 8))
    rows = mask_sweep(tiny_corpus, [0.0, 0.5], cfg, DisruptionConfig(downsample_ratio=2),
                      TrainConfig(warmup_iters=1, total_iters=3, checkpoint_every=0), tmp_path,
                      window=2)
    assert [r for r, _ in rows] == [0.0, 0.5]
    assert (tmp_path / "mask_sweep.csv").read_text().splitlines()[0] == "r,final_l1"
