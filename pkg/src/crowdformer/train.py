"""Training objective and optimizer: smooth-L1 count regression with AdamW.

The smooth-L1 loss is quadratic, 0.5*(x-y)^2 / beta, while |x-y| <= beta and
linear, |x-y| - 0.5*beta, beyond; both value and derivative are continuous
at the joint. One training step processes one image, i.e. its six crops as
a batch, and by default averages the six per-crop loss terms (set
loss.granularity = image to regress the summed prediction against the
image total instead).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import LossConfig, OptimConfig
from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


def smooth_l1(pred: Tensor, target, beta: float) -> Tensor:
    """Mean smooth-L1 between predictions and constant targets.

    Returns a scalar tensor; for vector inputs the per-element terms are
    averaged over the batch.
    """
    if beta <= 0:
        raise ValueError(f"smooth_l1: beta must be positive, got {beta}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise T.ShapeError(f"smooth_l1: target shape {target.shape} != prediction shape {pred.shape}")
    diff = pred - Tensor(target)
    absdiff = diff.abs()
    quadratic = (diff * diff) * (0.5 / beta)
    linear = absdiff - 0.5 * beta
    per_elem = T.where(absdiff.data <= beta, quadratic, linear)
    return per_elem.mean()


class AdamW:
    """AdamW with decoupled weight decay.

    The decay term lr * wd * p is subtracted from each parameter directly,
    independent of the bias-corrected moment update.
    """

    def __init__(self, params: dict, config: OptimConfig):
        config.validate()
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradientError(
                f"AdamW.step: {len(missing)} parameter(s) lack gradients, e.g. {missing[0]!r}"
            )
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay:
                p.data -= cfg.learning_rate * cfg.weight_decay * p.data
            p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def state_arrays(self) -> dict:
        """Moment arrays keyed for checkpointing, in parameter order."""
        out = {}
        for name in self.params:
            out[f"adam_m/{name}"] = self.m[name]
        for name in self.params:
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam_m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam_v/{name}"], dtype=np.float64)
        self.step_count = int(step_count)


def train_epoch(model, train_set, loss_cfg: LossConfig, optimizer: AdamW, rng: np.random.Generator) -> float:
    """One pass over the training set; one optimizer step per image.

    Returns the mean loss over the epoch. Image order is reshuffled from the
    provided generator, so the full run is deterministic given the seed.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    order = rng.permutation(n)
    losses = []
    for idx in order:
        crops, crop_counts, total = train_set.batch(int(idx), rng)
        preds = model(Tensor(crops))
        if loss_cfg.granularity == "image":
            loss = smooth_l1(preds.sum().reshape((1,)), [total], loss_cfg.beta)
        else:
            loss = smooth_l1(preds, crop_counts, loss_cfg.beta)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))
