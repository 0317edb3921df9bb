import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dae3d.losses import (CMCL_ALPHA, SimilarityMatrix, cmcl_loss, dice_loss, dice_score,
                          label_matrix, pretrain_loss, similarity)
from dae3d.model import l2_normalize
from dae3d.tensor import ShapeError, Tensor, float64_mode


def unit_rows(b, d, seed):
    z = np.random.default_rng(seed).normal(size=(b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def bce(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def sigmoid(s):
    return 1.0 / (1.0 + math.exp(-s))


class TestSimilarity:
    def test_identical_vectors(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(similarity(z).values.data, math.exp(0.07) * np.ones((2, 2)))

    def test_orthogonal(self):
        s = similarity(np.eye(3)).values.data
        np.testing.assert_allclose(s - np.diag(np.diag(s)), 0.0)

    def test_scale(self):
        assert SimilarityMatrix(Tensor(np.eye(2))).scale == pytest.approx(1.0725, abs=1e-4)

    def test_requires_unit_rows(self):
        with pytest.raises(ValueError):
            similarity(np.array([[2.0, 0.0]]))


class TestLabelMatrix:
    def test_examples(self):
        np.testing.assert_array_equal(label_matrix(["CT", "CT"]), np.ones((2, 2)))
        np.testing.assert_array_equal(label_matrix(["CT", "T1"]), np.eye(2))
        np.testing.assert_array_equal(label_matrix(["T1", "T2", "t1"]),
                                      [[1, 0, 1], [0, 1, 0], [1, 0, 1]])

    def test_exhaustive_up_to_four(self):
        pool = ["CT", "T1", "T2", "FLAIR"]
        for b in range(1, 5):
            for mods in itertools.product(pool, repeat=b):
                expected = [[1.0 if mods[i] == mods[j] else 0.0 for j in range(b)]
                            for i in range(b)]
                assert label_matrix(list(mods)).tolist() == expected


class TestCmcl:
    def test_closed_form(self):
        s = math.exp(0.07)
        sim = SimilarityMatrix(Tensor(s * np.eye(2), dtype=np.float64))
        cells = [bce(sigmoid(s), 1), bce(sigmoid(0.0), 0), bce(sigmoid(0.0), 0), bce(sigmoid(s), 1)]
        expected = CMCL_ALPHA * sum(cells) / 4
        assert cmcl_loss(sim, np.eye(2)).item() == pytest.approx(expected, rel=1e-12)

    def test_monotone_in_positive_similarity(self):
        vals = [cmcl_loss(Tensor(np.full((3, 3), s), dtype=np.float64), np.ones((3, 3))).item()
                for s in np.linspace(-2, 10, 13)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cmcl_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10**6))
    def test_permutation_invariance(self, b, seed):
        rng = np.random.default_rng(seed)
        z = unit_rows(b, 5, seed)
        mods = list(rng.choice(["CT", "T1", "T2"], size=b))
        perm = rng.permutation(b)
        with float64_mode():
            a = cmcl_loss(similarity(z), label_matrix(mods)).item()
            p = cmcl_loss(similarity(z[perm]), label_matrix([mods[i] for i in perm])).item()
        assert a == pytest.approx(p, rel=1e-12, abs=1e-15)

    def test_single_modality_is_defined(self):
        loss = cmcl_loss(similarity(unit_rows(3, 4, 0)), label_matrix(["CT"] * 3)).item()
        assert math.isfinite(loss) and loss > 0


class TestPretrainLoss:
    def test_perfect_reconstruction_no_cmcl(self):
        x = np.random.default_rng(0).random((2, 4, 4, 4)).astype(np.float32)
        total, l1, cm = pretrain_loss(Tensor(x), x, unit_rows(2, 3, 0).astype(np.float32),
                                      ["CT", "T1"], alpha=0.0)
        assert total.item() == 0.0 and l1.item() == 0.0 and cm.item() == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 1.0))
    def test_total_is_sum_bit_exact(self, seed, alpha):
        rng = np.random.default_rng(seed)
        recon = Tensor(rng.random((3, 4, 4, 4)).astype(np.float32))
        z = l2_normalize(Tensor(rng.normal(size=(3, 5)).astype(np.float32)))
        total, l1, cm = pretrain_loss(recon, rng.random((3, 4, 4, 4)), z, ["CT", "T1", "CT"],
                                      alpha=alpha)
        assert total.data == l1.data + cm.data

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pretrain_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 3)),
                          np.eye(1), ["CT"])


class TestDice:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).integers(0, 3, size=(6, 6, 6))
        pred = np.moveaxis(np.eye(3)[gt], -1, 0)
        assert dice_loss(pred, gt).item() <= 1e-4

    def test_uniform_prediction(self):
        gt = np.zeros((4, 4, 4), dtype=int)
        pred = np.full((2, 4, 4, 4), 0.5)
        v, s = gt.size, 1e-5
        class0 = (2 * 0.5 * v + s) / (0.5 * v + v + s)
        class1 = s / (0.5 * v + s)
        assert class0 == pytest.approx(2 / 3, rel=1e-6)
        assert dice_loss(pred, gt).item() == pytest.approx(1 - (class0 + class1) / 2, rel=1e-6)

    def test_class_count_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(np.full((2, 2, 2, 2), 0.5), np.full((2, 2, 2), 2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(np.full((2, 2, 2, 2), 0.5), np.zeros((2, 2, 3), dtype=int))

    def test_background_only(self):
        gt = np.zeros((4, 4, 4), dtype=int)
        assert dice_score(np.zeros_like(gt), gt, 2)[0] == pytest.approx(1.0)

    def test_batched_matches_unbatched_single(self):
        gt = np.random.default_rng(1).integers(0, 2, size=(4, 4, 4))
        p = np.random.default_rng(2).random((4, 4, 4))
        pred = np.stack([p, 1 - p])
        assert dice_loss(pred, gt).item() == dice_loss(pred[None], gt[None]).item()
