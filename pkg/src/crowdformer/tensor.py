"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in 64-bit precision so gradients can be validated against
central finite differences. Operations record themselves on a dynamic tape
(parent links plus a backward closure); ``Tensor.backward`` replays the tape
in reverse topological order and accumulates gradients into leaf tensors
that have ``requires_grad`` set.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonScalarLossError",
    "no_grad",
    "concat",
    "conv2d",
    "gelu",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "matmul",
    "softmax",
    "where",
    "trunc_normal",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class NonScalarLossError(ValueError):
    """backward() was called on a tensor that is not a scalar."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (forward-only execution)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``data`` is a row-major numpy array; ``grad`` is either None or an array
    of the same shape. Tensors produced by operations keep references to
    their parents and a backward closure so that ``backward()`` can replay
    the recorded computation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy); mutate only on leaf tensors."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad.

        Repeated calls without clearing accumulate, matching optimizer
        conventions. Raises NonScalarLossError unless self holds one element.
        """
        if self.data.size != 1:
            raise NonScalarLossError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        # Iterative DFS: deep stage stacks would overflow Python's recursion limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self) -> "Tensor":
        return tabs(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and structural ops -------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})"
        )
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.shape != a.shape:
                ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.shape != b.shape:
                gb = _unbroadcast(gb, b.shape)
        return (ga, gb)

    return _make(data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(data, (a,), bw)


def tabs(a: Tensor) -> Tensor:
    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bw)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select elementwise from a (where mask) or b. The mask is a constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeError(
            f"where: shapes must match exactly, got mask {mask.shape}, {a.shape}, {b.shape}"
        )
    data = np.where(mask, a.data, b.data)

    def bw(g):
        ga = g * mask if a.requires_grad else None
        gb = g * ~mask if b.requires_grad else None
        return (ga, gb)

    return _make(data, (a, b), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), bw)


# -- neural-network primitives -------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: y = x @ weight.T + bias.

    weight has shape (d_out, d_in); bias, when given, shape (d_out,).
    """
    d_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != d_in:
        raise ShapeError(
            f"linear: input last dim {d_in} does not match weight in_features "
            f"{weight.shape[1] if weight.ndim == 2 else weight.shape}"
        )
    d_out = weight.shape[0]
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({d_out},)")

    x2 = x.data.reshape(-1, d_in)
    y = x2 @ weight.data.T
    if bias is not None:
        y += bias.data
    out_shape = x.shape[:-1] + (d_out,)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y.reshape(out_shape), parents, bw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding.

    weight has shape (c_out, c_in/groups, kh, kw). Output spatial size is
    floor((H + 2*padding - kh)/stride) + 1, likewise for width.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got {x.ndim} dims")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {weight.ndim} dims")
    n, c, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c % groups != 0:
        raise ShapeError(f"conv2d: input channels {c} not divisible by groups={groups}")
    if c_out % groups != 0:
        raise ShapeError(f"conv2d: output channels {c_out} not divisible by groups={groups}")
    if c_in_g != c // groups:
        raise ShapeError(
            f"conv2d: kernel expects {c_in_g} channels per group, input supplies "
            f"{c // groups} (channels={c}, groups={groups})"
        )
    if h + 2 * padding < kh:
        raise ShapeError(f"conv2d: padded height {h + 2 * padding} < kernel height {kh}")
    if w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded width {w + 2 * padding} < kernel width {kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    depthwise = groups == c and c_out == c and c_in_g == 1

    def windows(arr):
        if padding:
            arr = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(arr, (kh, kw), axis=(2, 3))
        return win[:, :, ::stride, ::stride]  # (n, c, h_out, w_out, kh, kw)

    win = windows(x.data)
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
        wmat = weight.data.reshape(c_out, -1)
        y = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
        y = np.ascontiguousarray(y)
    elif depthwise:
        cols = win.reshape(n, c, h_out * w_out, kh * kw)
        y = np.matmul(cols, weight.data.reshape(c, kh * kw, 1))
        y = y.reshape(n, c, h_out, w_out)
    else:
        og = c_out // groups
        y = np.empty((n, c_out, h_out, w_out))
        for gi in range(groups):
            sub = win[:, gi * c_in_g : (gi + 1) * c_in_g]
            cols = sub.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, -1)
            wm = weight.data[gi * og : (gi + 1) * og].reshape(og, -1)
            y[:, gi * og : (gi + 1) * og] = (
                (cols @ wm.T).reshape(n, h_out, w_out, og).transpose(0, 3, 1, 2)
            )
    del win
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        need_x, need_w = x.requires_grad, weight.requires_grad
        if need_w:
            win_b = windows(x.data)  # recomputed: cheaper than caching the columns
            if groups == 1:
                cols_b = win_b.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, -1)
                gcols = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
                gw = (gcols.T @ cols_b).reshape(weight.shape)
            elif depthwise:
                cols_b = win_b.reshape(n, c, h_out * w_out, kh * kw)
                gw = np.einsum(
                    "ncl,nclk->ck", g.reshape(n, c, -1), cols_b, optimize=True
                ).reshape(weight.shape)
            else:
                og = c_out // groups
                gw = np.empty_like(weight.data)
                for gi in range(groups):
                    sub = win_b[:, gi * c_in_g : (gi + 1) * c_in_g]
                    cols_b = sub.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, -1)
                    gcols = g[:, gi * og : (gi + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
                    gw[gi * og : (gi + 1) * og] = (gcols.T @ cols_b).reshape(og, c_in_g, kh, kw)
            del win_b
        if need_x:
            if groups == 1:
                gcols = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
                gwin = (
                    (gcols @ weight.data.reshape(c_out, -1))
                    .reshape(n, h_out, w_out, c, kh, kw)
                    .transpose(0, 3, 1, 2, 4, 5)
                )
            elif depthwise:
                gwin = g[:, :, :, :, None, None] * weight.data.reshape(1, c, 1, 1, kh, kw)
            else:
                og = c_out // groups
                gwin = np.empty((n, c, h_out, w_out, kh, kw))
                for gi in range(groups):
                    gcols = g[:, gi * og : (gi + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
                    gwin[:, gi * c_in_g : (gi + 1) * c_in_g] = (
                        (gcols @ weight.data[gi * og : (gi + 1) * og].reshape(og, -1))
                        .reshape(n, h_out, w_out, c_in_g, kh, kw)
                        .transpose(0, 3, 1, 2, 4, 5)
                    )
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gwin[
                        :, :, :, :, i, j
                    ]
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if padding:
                gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y, parents, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then rescale."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    y = xhat * gamma.data + beta.data

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = ivar * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        return (gx, gg, gb)

    return _make(y, (x, gamma, beta), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def gelu(x: Tensor, tanh_approx: bool = False) -> Tensor:
    """Gaussian-error linear unit.

    Default is the exact form x * Phi(x) with Phi the standard normal CDF;
    tanh_approx=True switches to the common tanh approximation.
    """
    if tanh_approx:
        x3 = x.data * x.data * x.data
        u = _SQRT_2_OVER_PI * (x.data + 0.044715 * x3)
        t = np.tanh(u)
        y = 0.5 * x.data * (1.0 + t)

        def bw(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x.data * x.data)
            return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    else:
        phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        y = x.data * phi_cdf

        def bw(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            return (g * (phi_cdf + x.data * pdf),)

    return _make(y, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be NCHW, got {x.ndim} dims")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(y, (x,), bw)


# -- initialization helpers -----------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples resampled until they fall inside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out
