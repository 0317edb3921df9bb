"""AdamW with decoupled weight decay and a linear-warm-up cosine schedule."""

from __future__ import annotations

import math

import numpy as np


class NumericError(ArithmeticError):
    """A loss or gradient stopped being finite."""


def lr_schedule(step, base_lr, warmup_iters, total_iters):
    """Linear ramp 0 -> base_lr over ``warmup_iters``, then half-cosine down to 0."""
    if step < 0 or step > total_iters:
        raise ValueError(f"step {step} outside [0, {total_iters}]")
    if warmup_iters > total_iters:
        raise ValueError(f"warmup_iters {warmup_iters} exceeds total_iters {total_iters}")
    if step < warmup_iters:
        return base_lr * step / warmup_iters
    if total_iters == warmup_iters:
        return base_lr
    progress = (step - warmup_iters) / (total_iters - warmup_iters)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        # params: mapping name -> Tensor
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"no gradient for parameter {name}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state(self):
        out = {"step": np.array(self.step_count, dtype=np.float32)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.step_count = int(state["step"])
        for k, p in self.params.items():
            self.m[k] = np.array(state[f"m.{k}"], dtype=p.data.dtype)
            self.v[k] = np.array(state[f"v.{k}"], dtype=p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total
