"""Pre-training and fine-tuning objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .volume import ModalityTag

TEMPERATURE = 0.07
CMCL_ALPHA = 0.05
DICE_SMOOTH = 1e-5


@dataclass
class SimilarityMatrix:
    values: Tensor  # (B, B)
    temperature: float = TEMPERATURE

    @property
    def scale(self):
        return math.exp(self.temperature)


def similarity(z, t=TEMPERATURE, tol=1e-5):
    """Scaled cosine similarities ``z z^T exp(t)`` of unit-norm latents."""
    z = T.tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"similarity expects a (B, dim) matrix, got {z.shape}")
    norms = np.linalg.norm(z.data.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"latent rows must be unit-norm, got norms {norms}")
    return SimilarityMatrix((z @ z.T) * math.exp(t), t)


def label_matrix(modalities):
    """1 where two batch elements share a modality (case-insensitive), else 0."""
    tags = [ModalityTag(m) for m in modalities]
    return np.array([[float(a == b) for b in tags] for a in tags])


def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``labels``."""
    labels = np.asarray(labels, dtype=logits.dtype)
    return T.softplus(logits) - logits * labels


def cmcl_loss(sim, labels, alpha=CMCL_ALPHA):
    """Cross-modal contrastive loss: alpha times the mean of row- and column-wise BCE."""
    values = sim.values if isinstance(sim, SimilarityMatrix) else T.tensor(sim)
    labels = np.asarray(labels)
    if values.shape != labels.shape or values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ShapeError(f"cmcl_loss: similarity {values.shape} vs labels {labels.shape}")
    per_cell = bce_with_logits(values, labels)
    rows = per_cell.mean(axis=1).mean()
    cols = per_cell.mean(axis=0).mean()
    return (rows + cols) * (0.5 * alpha)


def pretrain_loss(recon, target, z, modalities, alpha=CMCL_ALPHA, t=TEMPERATURE):
    """Returns ``(total, l1_part, cmcl_part)`` with total = l1 + cmcl."""
    target = T.tensor(target, dtype=recon.dtype)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs target {target.shape}")
    l1_part = T.l1(recon, target)
    cmcl_part = cmcl_loss(similarity(z, t), label_matrix(modalities), alpha)
    return l1_part + cmcl_part, l1_part, cmcl_part


def _one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels span [{labels.min()}, {labels.max()}] but pred has {k} classes")
    return np.moveaxis(np.eye(k)[labels], -1, labels.ndim - 3)


def dice_loss(pred, gt, smooth=DICE_SMOOTH):
    """Soft Dice loss for class probabilities ``pred`` ([B,] K, D, H, W).

    ``gt`` holds integer labels ([B,] D, H, W). Sums run over batch and voxels.
    """
    pred = T.tensor(pred)
    gt = np.asarray(gt)
    if pred.ndim == 4:
        pred = pred.reshape(1, *pred.shape)
        gt = gt[None]
    if pred.ndim != 5 or gt.shape != pred.shape[:1] + pred.shape[2:]:
        raise ShapeError(f"dice_loss: pred {pred.shape} vs labels {gt.shape}")
    k = pred.shape[1]
    if np.any(np.abs(pred.data.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("pred channels must sum to 1 per voxel")
    g = _one_hot(gt, k).astype(pred.dtype)
    axes = (0, 2, 3, 4)
    inter = (pred * g).sum(axis=axes)
    denom = pred.sum(axis=axes) + g.sum(axis=axes) + smooth
    dice = (inter * 2.0 + smooth) / denom
    return 1.0 - dice.mean()


def dice_score(pred_labels, gt, k, smooth=DICE_SMOOTH):
    """Per-class hard Dice of integer label maps; returns an array of length ``k``."""
    p = _one_hot(np.asarray(pred_labels)[None], k)
    g = _one_hot(np.asarray(gt)[None], k)
    axes = tuple(i for i in range(p.ndim) if i != 1)
    inter = (p * g).sum(axis=axes)
    return (2 * inter + smooth) / (p.sum(axis=axes) + g.sum(axis=axes) + smooth)
