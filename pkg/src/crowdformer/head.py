"""Feature aggregation and count regression.

Each pyramid level is global-average-pooled to a channel vector, projected
by an independent per-stage linear layer to a common width, and the four
projections are concatenated in stage order. A single linear layer maps the
concatenated vector to one scalar count per crop; no activation is applied,
so the raw regression may go negative early in training (evaluation clamps
at zero, training never does).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, Linear
from .config import ModelConfig
from .tensor import ShapeError, Tensor


class AggregationHead:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.agg_width = config.agg_width
        self.projections = [Linear(dim, config.agg_width, rng) for dim in config.embed_dims]
        self.out = Linear(4 * config.agg_width, 1, rng)

    def aggregate(self, pyramid: FeaturePyramid) -> Tensor:
        """Pool, project and concatenate: (N, C_i, H_i, W_i) x4 -> (N, 4*agg_width)."""
        if len(pyramid.maps) != len(self.projections):
            raise ShapeError(
                f"aggregate: expected {len(self.projections)} pyramid levels, got {len(pyramid.maps)}"
            )
        pieces = []
        for proj, fmap in zip(self.projections, pyramid):
            pooled = T.global_avg_pool(fmap)
            pieces.append(proj(pooled))
        return T.concat(pieces, axis=1)

    def regress(self, feature: Tensor) -> Tensor:
        """One affine map to a single scalar per crop: (N, 4*agg_width) -> (N,)."""
        width = 4 * self.agg_width
        if feature.shape[-1] != width:
            raise ShapeError(
                f"regress: feature width {feature.shape[-1]} != head input width {width}"
            )
        return self.out(feature).reshape((feature.shape[0],))

    def __call__(self, pyramid: FeaturePyramid) -> Tensor:
        return self.regress(self.aggregate(pyramid))

    def named_params(self, prefix: str = "head"):
        for i, proj in enumerate(self.projections):
            yield from proj.named_params(f"{prefix}.proj{i + 1}")
        yield from self.out.named_params(f"{prefix}.out")
