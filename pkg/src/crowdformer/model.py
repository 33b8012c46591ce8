"""The full counting model: backbone plus aggregation head."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .backbone import Backbone, FeaturePyramid
from .config import ModelConfig
from .head import AggregationHead
from .tensor import Tensor, no_grad


class CrowdFormer:
    """Maps a batch of square crops to one estimated count per crop."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.backbone = Backbone(config, rng)
        self.head = AggregationHead(config, rng)

    def __call__(self, crops: Tensor) -> Tensor:
        return self.head(self.backbone(crops))

    def pyramid(self, crops: Tensor) -> FeaturePyramid:
        return self.backbone(crops)

    def named_params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, p in self.backbone.named_params("backbone"):
            out[name] = p
        for name, p in self.head.named_params("head"):
            out[name] = p
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def predict_counts(self, crops_array: np.ndarray) -> np.ndarray:
        """Forward pass without tape recording; returns raw per-crop counts."""
        with no_grad():
            return self(Tensor(crops_array)).data.copy()
