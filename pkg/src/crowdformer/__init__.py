"""Weakly-supervised crowd counting on a self-contained float64 autodiff core.

A four-stage pyramid transformer backbone turns a square crop into
multi-scale feature maps; global average pooling, per-stage projections and
a single linear layer regress one scalar count per crop. Training uses
smooth-L1 loss with AdamW; evaluation reports MAE and (root) MSE over
image-level counts.
"""

from .backbone import Attention, Backbone, EncoderLayer, FeaturePyramid, PatchEmbed
from .config import (
    BETA_PRESETS,
    ConfigError,
    DataConfig,
    LossConfig,
    ModelConfig,
    OptimConfig,
    RunConfig,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)
from .gradcheck import GradCheckReport, finite_diff_check, standard_suite
from .head import AggregationHead
from .model import CrowdFormer
from .tensor import (
    NonScalarLossError,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    matmul,
    no_grad,
    softmax,
    where,
)
from .train import AdamW, MissingGradientError, smooth_l1, train_epoch

__version__ = "0.1.0"
