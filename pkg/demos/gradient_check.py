"""Reverse-mode gradients against central differences.

A two-layer network with batch norm is built on the tape, differentiated once,
and each weight gradient is compared with a numerical estimate.
"""
import numpy as np

from netquant.autodiff import (BatchNormState, Tape, Tensor, backward, batchnorm, dense,
                               mean_all, relu, square)

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(16, 5)), dtype=np.float64)
w1 = Tensor(rng.normal(size=(5, 8)), requires_grad=True, dtype=np.float64)
b1 = Tensor(np.zeros((1, 8)), requires_grad=True, dtype=np.float64)
gamma = Tensor(np.ones((1, 8)), requires_grad=True, dtype=np.float64)
beta = Tensor(np.zeros((1, 8)), requires_grad=True, dtype=np.float64)
w2 = Tensor(rng.normal(size=(8, 1)), requires_grad=True, dtype=np.float64)
b2 = Tensor(np.zeros((1, 1)), requires_grad=True, dtype=np.float64)


def loss_value():
    h = relu(batchnorm(dense(x, w1, b1), gamma, beta, BatchNormState(8), training=True))
    return mean_all(square(dense(h, w2, b2)))


with Tape() as tape:
    loss = loss_value()
grads = backward(tape, loss)
print("loss", float(loss.value[0, 0]))

for name, p in [("w1", w1), ("gamma", gamma), ("w2", w2)]:
    num = np.zeros_like(p.value)
    for idx in np.ndindex(p.shape):
        old = p.value[idx]
        p.value[idx] = old + 1e-6
        up = float(loss_value().value[0, 0])
        p.value[idx] = old - 1e-6
        down = float(loss_value().value[0, 0])
        p.value[idx] = old
        num[idx] = (up - down) / 2e-6
    err = np.abs(grads[p] - num).max() / max(np.abs(num).max(), 1e-12)
    print(f"{name}: max relative error {err:.2e}")
