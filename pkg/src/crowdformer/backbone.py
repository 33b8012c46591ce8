"""Four-stage pyramid transformer backbone.

Each stage tokenizes its input with an overlapping patch embedding
(convolution with kernel 2S-1, padding S-1, stride S, so adjacent windows
overlap by half their area) and runs a stack of encoder layers. Attention
uses spatial reduction: for ratio r > 1 the keys/values come from a token
grid downsampled by an r-strided convolution. Positional information enters
through a 3x3 depthwise convolution inside each feed-forward block, so no
explicit position embeddings are needed and stage i emits an
N x C_i x (S/2^(i+1)) x (S/2^(i+1)) feature map for an S x S input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor, trunc_normal

# Initialization policy, pinned for reproducible from-scratch runs:
# truncated normal (std 0.02) for all weights, zeros for biases,
# ones/zeros for norm scales/shifts.
INIT_STD = 0.02


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(trunc_normal(rng, (d_out, d_in), INIT_STD), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class Conv2d:
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Tensor(
            trunc_normal(rng, (c_out, c_in // groups, kernel, kernel), INIT_STD),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups
        )

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def named_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class Attention:
    """Multi-head self-attention with spatially reduced keys/values.

    For sr_ratio > 1 the key/value tokens come from the input grid
    downsampled by a (kernel = stride = sr_ratio) convolution followed by a
    layer norm; queries keep full resolution, so the output length equals
    the input length.
    """

    def __init__(self, dim: int, num_heads: int, sr_ratio: int, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ShapeError(f"attention: dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.sr_ratio = sr_ratio
        self.scale = (dim // num_heads) ** -0.5
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, kernel=sr_ratio, rng=rng, stride=sr_ratio)
            self.sr_norm = LayerNorm(dim)
        else:
            self.sr = None
            self.sr_norm = None

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        n, t, c = x.shape
        h, w = grid
        if t != h * w:
            raise ShapeError(f"attention: {t} tokens do not fill a {h}x{w} grid")
        heads, hd = self.num_heads, c // self.num_heads

        q = self.q(x).reshape((n, t, heads, hd)).transpose((0, 2, 1, 3))

        src = x
        if self.sr is not None:
            planes = x.transpose((0, 2, 1)).reshape((n, c, h, w))
            planes = self.sr(planes)
            t_kv = (h // self.sr_ratio) * (w // self.sr_ratio)
            src = planes.reshape((n, c, t_kv)).transpose((0, 2, 1))
            src = self.sr_norm(src)
        t_kv = src.shape[1]

        k = self.k(src).reshape((n, t_kv, heads, hd)).transpose((0, 2, 3, 1))
        v = self.v(src).reshape((n, t_kv, heads, hd)).transpose((0, 2, 1, 3))

        attn = T.softmax((q @ k) * self.scale)
        out = (attn @ v).transpose((0, 2, 1, 3)).reshape((n, t, c))
        return self.proj(out)

    def named_params(self, prefix: str):
        for sub in ("q", "k", "v", "proj"):
            yield from getattr(self, sub).named_params(f"{prefix}.{sub}")
        if self.sr is not None:
            yield from self.sr.named_params(f"{prefix}.sr")
            yield from self.sr_norm.named_params(f"{prefix}.sr_norm")


class Mlp:
    """Feed-forward block; the 3x3 depthwise convolution over the token grid
    is what injects positional information."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, gelu_tanh: bool = False):
        self.hidden = hidden
        self.gelu_tanh = gelu_tanh
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, kernel=3, rng=rng, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        n, t, _ = x.shape
        h, w = grid
        x = self.fc1(x)
        planes = x.transpose((0, 2, 1)).reshape((n, self.hidden, h, w))
        planes = self.dwconv(planes)
        x = planes.reshape((n, self.hidden, t)).transpose((0, 2, 1))
        x = T.gelu(x, tanh_approx=self.gelu_tanh)
        return self.fc2(x)

    def named_params(self, prefix: str):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.dwconv.named_params(f"{prefix}.dwconv")
        yield from self.fc2.named_params(f"{prefix}.fc2")


class EncoderLayer:
    """Pre-norm residual encoder: attention sublayer, then feed-forward sublayer."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        sr_ratio: int,
        mlp_ratio: float,
        rng: np.random.Generator,
        gelu_tanh: bool = False,
    ):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, sr_ratio, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, gelu_tanh=gelu_tanh)

    def __call__(self, x: Tensor, grid: tuple) -> Tensor:
        x = x + self.attn(self.norm1(x), grid)
        x = x + self.mlp(self.norm2(x), grid)
        return x

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.mlp.named_params(f"{prefix}.mlp")


class PatchEmbed:
    """Overlapping patch embedding: kernel 2S-1, padding S-1, stride S,
    then layer norm over channels at each token."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.conv = Conv2d(
            c_in, c_out, kernel=2 * stride - 1, rng=rng, stride=stride, padding=stride - 1
        )
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor):
        n, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ShapeError(
                f"patch embed: spatial size {h}x{w} not divisible by stride {self.stride}"
            )
        planes = self.conv(x)
        _, c_out, h_out, w_out = planes.shape
        tokens = planes.reshape((n, c_out, h_out * w_out)).transpose((0, 2, 1))
        return self.norm(tokens), (h_out, w_out)

    def named_params(self, prefix: str):
        yield from self.conv.named_params(f"{prefix}.conv")
        yield from self.norm.named_params(f"{prefix}.norm")


@dataclass
class FeaturePyramid:
    """The four per-stage feature maps, NCHW, spatial side halving per stage."""

    maps: list

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i):
        return self.maps[i]


class Stage:
    def __init__(self, c_in, dim, depth, stride, heads, sr_ratio, mlp_ratio, rng, gelu_tanh):
        self.embed = PatchEmbed(c_in, dim, stride, rng)
        self.layers = [
            EncoderLayer(dim, heads, sr_ratio, mlp_ratio, rng, gelu_tanh=gelu_tanh)
            for _ in range(depth)
        ]
        self.norm = LayerNorm(dim)
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        tokens, (h, w) = self.embed(x)
        for layer in self.layers:
            tokens = layer(tokens, (h, w))
        tokens = self.norm(tokens)
        return tokens.transpose((0, 2, 1)).reshape((n, self.dim, h, w))

    def named_params(self, prefix: str):
        yield from self.embed.named_params(f"{prefix}.embed")
        for j, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{j}")
        yield from self.norm.named_params(f"{prefix}.norm")


class Backbone:
    """Stacks the four stages; stage i consumes stage i-1's feature map."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stages = []
        c_prev = config.in_channels
        for i in range(4):
            self.stages.append(
                Stage(
                    c_prev,
                    config.embed_dims[i],
                    config.stage_depths[i],
                    config.strides[i],
                    config.num_heads[i],
                    config.sr_ratios[i],
                    config.mlp_ratios[i],
                    rng,
                    config.gelu_tanh,
                )
            )
            c_prev = config.embed_dims[i]

    def __call__(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"backbone: expected N x {self.config.in_channels} x H x W input, got {x.shape}"
            )
        if x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ShapeError(
                f"backbone: expected {self.config.input_size}x{self.config.input_size} crops, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        maps = []
        cur = x
        for stage in self.stages:
            cur = stage(cur)
            maps.append(cur)
        return FeaturePyramid(maps)

    def named_params(self, prefix: str = "backbone"):
        for i, stage in enumerate(self.stages):
            yield from stage.named_params(f"{prefix}.stage{i + 1}")
