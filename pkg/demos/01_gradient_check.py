"""Checking the autodiff engine against finite differences.

Builds a tiny conv -> leaky-ReLU -> softmax -> cross-entropy pipeline, runs
one backward pass, and compares a few kernel gradients with central
differences. This is the same style of check the test suite runs across
every operator.
"""

import numpy as np

from segadapt.autodiff import Tensor, backward, conv2d, leaky_relu, log_clamped, mul, softmax_channel, sum_all

rng = np.random.default_rng(0)

# a 3-channel 8x8 "image", a 4-filter 3x3 kernel, and a random one-hot target
image = Tensor(rng.standard_normal((3, 8, 8)))
kernel = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
bias = Tensor(np.zeros(4), requires_grad=True)
target = np.eye(4)[rng.integers(0, 4, size=(8, 8))].transpose(2, 0, 1)


def loss_value() -> Tensor:
    logits = conv2d(image, kernel, bias, stride=1, padding=1)
    probs = softmax_channel(leaky_relu(logits, 0.2))
    return mul(sum_all(mul(log_clamped(probs), Tensor(target))), Tensor(-1.0))


loss = loss_value()
backward(loss)
print(f"loss = {loss.item():.6f}")

# central differences on three random kernel entries
step = 1e-6
worst = 0.0
for _ in range(3):
    idx = tuple(int(rng.integers(0, s)) for s in kernel.shape)
    keep = kernel.data[idx]
    kernel.data[idx] = keep + step
    up = loss_value().item()
    kernel.data[idx] = keep - step
    down = loss_value().item()
    kernel.data[idx] = keep
    fd = (up - down) / (2 * step)
    err = abs(fd - kernel.grad[idx]) / max(1.0, abs(fd))
    worst = max(worst, err)
    print(f"kernel{idx}: autodiff {kernel.grad[idx]:+.8f}  finite-diff {fd:+.8f}  rel err {err:.2e}")

print(f"worst relative error: {worst:.2e} (expect < 1e-6 in float64)")
