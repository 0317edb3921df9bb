"""Gradient-check cases for every differentiable kernel, keyed by name.

Each case builds random inputs from a seed and returns a
:class:`~dae3d.gradcheck.GradCheckResult`. Kernel and loss cases use a
float64 tape; the attention block and the full forward pass are checked
with a float32 tape, and once more in float64.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .disruption import DisruptionConfig
from .gradcheck import check_gradients
from .losses import cmcl_loss, dice_loss, label_matrix, pretrain_loss, similarity
from .model import DaeModel, ModelConfig, forward, l2_normalize
from .volume import Volume

ELEMENTWISE_TOL = 1e-5
END_TO_END_TOL = 1e-3

SMALL_MODEL = ModelConfig(patch=(2, 2, 2), embed_dim=8, depth=1, heads=2, mlp_ratio=2,
                          latent_dim=4, crop=(8, 8, 8))


def _leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _weights(rng, shape):
    return T.Tensor(rng.normal(size=shape))


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
        w = _weights(rng, (3, 5))
        return check_gradients(lambda: ((a @ b) * w).sum(), [a, b])


def case_softmax(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = _leaf(rng, 3, 6, scale=2.0)
        w = _weights(rng, (3, 6))
        return check_gradients(lambda: (T.softmax(x, axis=-1) * w).sum(), [x])


def case_layer_norm(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = _leaf(rng, 4, 6)
        g = T.Tensor(1.0 + 0.1 * rng.normal(size=6), requires_grad=True)
        b = _leaf(rng, 6, scale=0.1)
        w = _weights(rng, (4, 6))
        return check_gradients(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b])


def case_gelu(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = _leaf(rng, 5, 4, scale=2.0)
        w = _weights(rng, (5, 4))
        return check_gradients(lambda: (T.gelu(x) * w).sum(), [x])


def case_sigmoid(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        x = _leaf(rng, 5, 4, scale=2.0)
        w = _weights(rng, (5, 4))
        return check_gradients(lambda: (T.sigmoid(x) * w).sum(), [x])


def case_l1(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        a = _leaf(rng, 4, 5)
        # keep residuals well away from the kink at zero
        gap = rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(0.1, 1.0, size=(4, 5))
        b = T.Tensor(a.data + gap, requires_grad=True)
        return check_gradients(lambda: T.l1(a, b), [a, b])


def _block_case(seed, dtype):
    rng = np.random.default_rng(seed)
    model = DaeModel(SMALL_MODEL, seed=seed, dtype=dtype, init_std=0.3)
    x = T.Tensor(rng.normal(size=(2, SMALL_MODEL.n_tokens, 8)), requires_grad=True, dtype=dtype)
    w = T.Tensor(rng.normal(size=x.shape), dtype=dtype)
    block = [p for k, p in model.named_parameters() if k.startswith("blocks.0.")]
    names = ["x"] + [k for k in model.params if k.startswith("blocks.0.")]
    return check_gradients(lambda: (model._block(x, 0) * w).sum(), [x] + block,
                           max_entries=6, rng=rng, names=names, joint_scale=True)


def case_attention_block(seed):
    return _block_case(seed, np.float32)


def case_attention_block_f64(seed):
    with T.float64_mode():
        return _block_case(seed, np.float64)


def case_cmcl(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        z = _leaf(rng, 4, 3)
        mods = [["CT", "T1"][i] for i in rng.integers(0, 2, size=4)]
        labels = label_matrix(mods)

        def loss():
            return cmcl_loss(similarity(l2_normalize(z)), labels, alpha=1.0)

        return check_gradients(loss, [z])


def case_dice(seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        logits = _leaf(rng, 1, 3, 4, 4, 4)
        gt = rng.integers(0, 3, size=(1, 4, 4, 4))
        return check_gradients(lambda: dice_loss(T.softmax(logits, axis=1), gt), [logits])


def _forward_case(seed, dtype):
    rng = np.random.default_rng(seed)
    model = DaeModel(SMALL_MODEL, seed=seed, dtype=dtype, init_std=0.3)
    # bright probes keep every token's layer norm far from zero variance, and
    # distant targets keep L1 away from its kink
    crops = [Volume(rng.uniform(0.0, 4.0, SMALL_MODEL.crop), m) for m in ("CT", "T1")]
    target = rng.uniform(50.0, 51.0, size=(2, *SMALL_MODEL.crop))
    cfg = DisruptionConfig(seed=seed)

    def loss():
        recon, z, _ = forward(crops, cfg, model)
        return pretrain_loss(recon, target, z, ["CT", "T1"])[0]

    return check_gradients(loss, model.parameters(), max_entries=5, rng=rng,
                           names=list(model.params), joint_scale=True)


def case_forward(seed):
    return _forward_case(seed, np.float32)


def case_forward_f64(seed):
    with T.float64_mode():
        return _forward_case(seed, np.float64)


CASES = {
    "matmul": (case_matmul, ELEMENTWISE_TOL),
    "softmax": (case_softmax, ELEMENTWISE_TOL),
    "layer_norm": (case_layer_norm, ELEMENTWISE_TOL),
    "gelu": (case_gelu, ELEMENTWISE_TOL),
    "sigmoid": (case_sigmoid, ELEMENTWISE_TOL),
    "l1": (case_l1, ELEMENTWISE_TOL),
    "cmcl_loss": (case_cmcl, ELEMENTWISE_TOL),
    "dice_loss": (case_dice, ELEMENTWISE_TOL),
    "attention_block": (case_attention_block, END_TO_END_TOL),
    "attention_block_f64": (case_attention_block_f64, ELEMENTWISE_TOL),
    "full_forward": (case_forward, END_TO_END_TOL),
    "full_forward_f64": (case_forward_f64, ELEMENTWISE_TOL),
}
