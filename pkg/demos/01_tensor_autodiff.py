"""Tensor core walkthrough: float64 arrays, reverse-mode gradients, and
finite-difference verification.

Run: python3 demos/01_tensor_autodiff.py
"""

import numpy as np

from crowdformer import Tensor, conv2d, finite_diff_check, gelu, softmax

rng = np.random.default_rng(0)

print("== scalars and gradients ==")
p = Tensor([1.0, -2.0], requires_grad=True)
loss = (p * p).sum()
loss.backward()
print(f"loss = sum(p^2) at p={p.data} -> {loss.item():.1f}")
print(f"grad = 2p            -> {p.grad}")

print("\n== a convolution, checked against finite differences ==")
x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
out = conv2d(x, w, b, stride=2, padding=1)
print(f"conv2d: input {x.shape} kernel {w.shape} stride 2 pad 1 -> {out.shape}")
report = finite_diff_check(
    lambda x_, w_, b_: conv2d(x_, w_, b_, stride=2, padding=1), [x, w, b], name="conv2d"
)
print(report)

print("\n== numerically stable softmax ==")
huge = Tensor([1000.0, 1000.0, 999.0])
probs = softmax(huge)
print(f"softmax({huge.data}) = {np.round(probs.data, 4)} (sums to {probs.data.sum():.12f})")

print("\n== GELU: exact erf form vs tanh approximation ==")
xs = Tensor(np.linspace(-2, 2, 5))
print("x      :", np.round(xs.data, 2))
print("exact  :", np.round(gelu(xs).data, 4))
print("tanh   :", np.round(gelu(xs, tanh_approx=True).data, 4))
