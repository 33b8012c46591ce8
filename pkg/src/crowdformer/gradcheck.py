"""Finite-difference verification of reverse-mode gradients.

Each check compares directional derivatives: a random cotangent r turns the
op output into the scalar L = sum(f(...) * r); the tape provides dL/dx for
every checked input, and a central difference along a random direction v
provides an independent estimate of <dL/dx, v>. Perturbations are written
into the input tensors in place, so the checked function may either take
the tensors as arguments or close over them (e.g. module parameters). The
reported figure is the worst relative error over all trials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3

# Relative-error floor: keeps near-zero derivative pairs from dividing 0 by 0.
_SCALE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name}: max relative error {self.max_relative_error:.3e}"


def finite_diff_check(
    fn,
    inputs: list,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    trials: int = 20,
    seed: int = 0,
    name: str | None = None,
) -> GradCheckReport:
    """Check the reverse-mode gradient of fn(*inputs) against central differences.

    fn must return a single Tensor. All listed inputs are treated as
    differentiable; non-tensor arguments should be closed over by fn.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {step}")
    rng = np.random.default_rng(seed)
    originals = [t.data for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    cotangent = rng.standard_normal(out.shape)
    loss = (out * Tensor(cotangent)).sum()
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def scalar_at(points) -> float:
        for t, p in zip(inputs, points):
            t.data = p
        try:
            with no_grad():
                val = fn(*inputs)
        finally:
            for t, orig in zip(inputs, originals):
                t.data = orig
        return float(np.sum(val.data * cotangent))

    worst = 0.0
    for _ in range(trials):
        direction = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
        direction = [d / norm for d in direction]
        fd_plus = scalar_at([o + step * d for o, d in zip(originals, direction)])
        fd_minus = scalar_at([o - step * d for o, d in zip(originals, direction)])
        fd = (fd_plus - fd_minus) / (2.0 * step)
        ad = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))
        rel = abs(ad - fd) / max(abs(ad), abs(fd), _SCALE_FLOOR)
        worst = max(worst, rel)

    return GradCheckReport(
        op_name=name or getattr(fn, "__name__", "op"),
        max_relative_error=worst,
        passed=worst <= tolerance,
    )


def standard_suite(model_config=None, seed: int = 0, trials: int = 20) -> list:
    """Gradient checks for every differentiable op plus the full model.

    Per-op checks run at DEFAULT_TOLERANCE; the end-to-end model check (one
    crop batch through backbone, head and loss) runs at END_TO_END_TOLERANCE.
    """
    from . import tensor as T
    from .backbone import Attention
    from .config import ModelConfig
    from .model import CrowdFormer
    from .train import smooth_l1

    rng = np.random.default_rng(seed)
    reports = []

    def check(name, fn, inputs, tolerance=DEFAULT_TOLERANCE):
        reports.append(
            finite_diff_check(
                fn,
                inputs,
                tolerance=tolerance,
                trials=trials,
                seed=int(rng.integers(1 << 31)),
                name=name,
            )
        )

    def rand(*shape):
        return Tensor(rng.standard_normal(shape))

    check("add", lambda a, b: a + b, [rand(3, 4), rand(3, 4)])
    check("mul", lambda a, b: a * b, [rand(3, 4), rand(3, 4)])
    check("matmul", lambda a, b: a @ b, [rand(2, 3, 4), rand(2, 4, 5)])
    check(
        "reshape_transpose",
        lambda a: a.reshape((2, 2, 6)).transpose((2, 0, 1)),
        [rand(4, 6)],
    )
    check("concat", lambda a, b: T.concat([a, b], axis=1), [rand(3, 2), rand(3, 4)])
    check("sum_mean", lambda a: a.sum(axis=1) + a.mean(axis=1), [rand(3, 4)])
    check("linear", lambda x, w, b: T.linear(x, w, b), [rand(5, 4), rand(3, 4), rand(3)])
    check(
        "conv2d",
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
        [rand(2, 4, 6, 6), rand(3, 4, 3, 3), rand(3)],
    )
    check(
        "conv2d_depthwise",
        lambda x, w, b: T.conv2d(x, w, b, padding=1, groups=4),
        [rand(2, 4, 5, 5), rand(4, 1, 3, 3), rand(4)],
    )
    check(
        "conv2d_grouped",
        lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=0, groups=2),
        [rand(1, 4, 5, 5), rand(6, 2, 3, 3), rand(6)],
    )
    check(
        "layer_norm",
        lambda x, g, b: T.layer_norm(x, g, b, eps=1e-6),
        [rand(4, 6), Tensor(1.0 + 0.1 * rng.standard_normal(6)), rand(6)],
    )
    check("softmax", T.softmax, [rand(3, 5)])
    check("gelu_erf", lambda x: T.gelu(x), [rand(4, 4)])
    check("gelu_tanh", lambda x: T.gelu(x, tanh_approx=True), [rand(4, 4)])
    check("global_avg_pool", T.global_avg_pool, [rand(2, 3, 4, 5)])

    attn = Attention(dim=8, num_heads=2, sr_ratio=2, rng=rng)
    attn_params = [p for _, p in attn.named_params("attn")]
    x_attn = rand(1, 16, 8)
    check(
        "attention",
        lambda *ps: attn(x_attn, (4, 4)),
        [x_attn] + attn_params,
    )

    # smooth_l1 has a derivative joint at |diff| = beta and a kink at 0;
    # targets keep every element safely on one branch.
    pred0 = Tensor(np.array([0.2, -0.4, 2.5, -3.0]))
    target0 = np.array([0.0, 0.0, 0.0, 0.0])
    check("smooth_l1", lambda p: smooth_l1(p, target0, beta=1.0), [pred0])

    if model_config is None:
        model_config = ModelConfig(
            input_size=32,
            stage_depths=(1, 1, 1, 1),
            embed_dims=(4, 8, 12, 16),
            num_heads=(1, 2, 2, 4),
            agg_width=8,
        )
    model = CrowdFormer(model_config, np.random.default_rng(seed + 1))
    s = model_config.input_size
    crop = Tensor(rng.standard_normal((1, 3, s, s)) * 0.5)
    target = np.array([3.0])
    params = list(model.named_params().values())
    check(
        "model_end_to_end",
        lambda *ps: smooth_l1(model(crop), target, beta=1.0),
        params,
        tolerance=END_TO_END_TOLERANCE,
    )
    return reports
