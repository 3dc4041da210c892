"""Reverse-mode gradients from the numpy core, checked against central differences."""

import numpy as np

from alst import numcore as nc
from alst.numcore import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
gain = Tensor(np.ones(6), requires_grad=True)
bias = Tensor(np.zeros(6), requires_grad=True)

# a small post-LN block: attention over 4 positions, residual, layer norm
q = x.reshape((1, 4, 6))
y = nc.layer_norm(q + nc.attention(q, q, q), gain, bias)
loss = nc.tsum(nc.square(y) * np.arange(6.0))
loss.backward()
print("loss", loss.item())
print("dloss/dx analytic\n", x.grad)


def f(arr):
    q = Tensor(arr).reshape((1, 4, 6))
    y = nc.layer_norm(q + nc.attention(q, q, q), gain, bias)
    return nc.tsum(nc.square(y) * np.arange(6.0)).item()


h = 1e-5
num = np.zeros_like(x.data)
for idx in np.ndindex(x.shape):
    up, down = x.data.copy(), x.data.copy()
    up[idx] += h
    down[idx] -= h
    num[idx] = (f(up) - f(down)) / (2 * h)

rel = np.abs(num - x.grad) / np.maximum(np.maximum(np.abs(num), np.abs(x.grad)), 1e-6)
print("max relative error", rel.max())

# non-finite values never pass silently
try:
    nc.log(Tensor(np.array([0.0, 1.0])))
except nc.NumericError as exc:
    print("caught:", exc)
