"""
Gradients on a tape
===================

Build a small expression, run it backwards, and compare the result with
central differences.
"""

import numpy as np

from dae3d import tensor as T
from dae3d.gradcheck import check_gradients

rng = np.random.default_rng(0)

# leaves are tensors that ask for gradients
x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True, name="x")
w = T.Tensor(rng.normal(size=(6, 3)), requires_grad=True, name="w")

target = T.Tensor(rng.random((4, 3)))
loss = (T.softmax(T.gelu(x @ w), axis=-1) * target).sum()
T.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# the checker recomputes the loss with each entry nudged by +-h in float64
result = check_gradients(lambda: (T.softmax(T.gelu(x @ w), axis=-1) * target).sum(),
                         [x, w])
for name, err in result.errors.items():
    print(f"{name}: max relative error {err:.2e}")

# float64 mode switches the default dtype, which is handy for tight checks
with T.float64_mode():
    y = T.Tensor([1.0, 3.0])
    print(y.dtype, T.layer_norm(y.reshape(1, 2), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0])).data)
