"""Central finite-difference checks for tape gradients.

The numeric side is always evaluated in float64 from the same parameter
values the tape saw, so a float32 tape can be checked without the
finite-difference roundoff swamping the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tol):
        return self.max_error < tol


def relative_error(analytic, numeric, scale=None):
    """Max elementwise deviation over the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    scale = max(scale, 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn, inputs, h=1e-3, max_entries=None, rng=None, names=None,
                    joint_scale=False):
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and closes over ``inputs`` (tensors with
    ``requires_grad``). When ``max_entries`` is set, only that many randomly
    chosen entries per input are perturbed. With ``joint_scale`` every input's
    error is scaled by the largest gradient over all inputs, which keeps
    parameters with structurally zero gradients from dominating.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    saved = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(np.float64)
    rng = rng or np.random.default_rng(0)
    result = GradCheckResult()
    sampled = []
    try:
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                idx = np.arange(flat.size)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2.0 * h)
            sampled.append((analytic[k].reshape(-1)[idx], numeric))
    finally:
        for t, data in zip(inputs, saved):
            t.data = data
    floor = None
    if joint_scale:
        floor = max(
            max(np.abs(a).max(initial=0), np.abs(n).max(initial=0))
            for a, n in zip(analytic, (n for _, n in sampled))
        )
    for k, (a, n) in enumerate(sampled):
        label = names[k] if names else (inputs[k].name or f"input{k}")
        result.errors[label] = relative_error(a, n, floor)
    return result


def gradcheck_suite(seeds=range(20)):
    """Per-operation worst-case relative error across seeds.

    Elementwise and loss kernels run with a float64 tape; the attention block
    and full forward run with a float32 tape.
    Returns ``{op_name: (max_error, tolerance)}``.
    """
    from . import checks

    report = {}
    for name, (case, tol) in checks.CASES.items():
        worst = 0.0
        for seed in seeds:
            worst = max(worst, case(seed).max_error)
        report[name] = (worst, tol)
    return report


def as_leaf(array, dtype=None):
    return Tensor(array, requires_grad=True, dtype=dtype)
