"""Convolution, transposed convolution, batch norm and the Adam optimizer.

Convolutions are cross-correlations over NCHW arrays. A transposed
convolution is implemented as the exact adjoint of the matching forward
convolution, so ``<conv2d(x), y> == <x, conv2d_transpose(y)>`` when both
share one weight array.

Weight layouts:

* ``Conv2D``:        (filters, in_channels, kh, kw)
* ``TranspConv2D``:  (in_channels, filters, kh, kw), i.e. the layout of the
  forward convolution it is the adjoint of.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, custom_op, get_default_dtype

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5


class NaNGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or Inf."""


# ---------------------------------------------------------------------------
# padding arithmetic


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (out, pad_before, pad_after) for 'Same' padding; extra pixel goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def transp_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return size * stride
    if padding == "valid":
        return (size - 1) * stride + kernel
    raise ValueError(f"unknown padding {padding!r}")


def _pads(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        return same_padding(size, kernel, stride)
    out = conv_output_size(size, kernel, stride, "valid")
    if out < 1:
        raise ShapeError(f"'Valid' convolution of extent {size} with kernel {kernel} is empty")
    # rows beyond the last window are ignored by a strided valid convolution
    return out, 0, size - ((out - 1) * stride + kernel)


# ---------------------------------------------------------------------------
# raw kernels on ndarrays


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, ho, wo, kh, kw) strided view of the padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _gather(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Forward correlation of a padded input: (B,C,Hp,Wp) x (F,C,kh,kw) -> (B,F,ho,wo)."""
    kh, kw = w.shape[2:]
    win = _windows(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, ho, wo, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, padded_shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_gather` with respect to its input."""
    b, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    out = np.zeros((b, c) + tuple(padded_shape), dtype=g.dtype)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    # (B, ho, wo, C, kh, kw)
    contrib = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += contrib[:, :, i, j]
    return out


def _weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    """d<gather(xp, w), g>/dw, shape (F, C, kh, kw)."""
    ho, wo = g.shape[2:]
    win = _windows(xp, kh, kw, stride, ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2D cross-correlation with zero padding; NCHW input, (F, C, kh, kw) weights."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d input, got shape {x.shape}")
    bsz, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weights expect {cw}")
    ho, top, bottom = _pads(h, kh, stride, padding)
    wo, left, right = _pads(wd, kw, stride, padding)
    if padding == "valid":
        xp = x.data[:, :, : h - bottom, : wd - right]
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    wdata = w.data
    out = _gather(xp, wdata, stride, ho, wo)
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def bw(g, needs):
        gx = gw = gb = None
        if needs[0]:
            full = _scatter(g, wdata, stride, xp.shape[2:])
            if padding == "valid":
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, :, : full.shape[2], : full.shape[3]] = full
            else:
                gx = full[:, :, top : top + h, left : left + wd]
        if needs[1]:
            gw = _weight_grad(xp, g, stride, kh, kw)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return custom_op(out, parents, bw)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: str = "same") -> Tensor:
    """Fractionally strided convolution; weights are (in_channels, filters, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects a 4-d input, got shape {x.shape}")
    bsz, c, h, wd = x.shape
    cw, f, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weights expect {cw}")
    ho = transp_output_size(h, kh, stride, padding)
    wo = transp_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("transposed convolution output is empty")
    _, top, bottom = _pads(ho, kh, stride, padding)
    _, left, right = _pads(wo, kw, stride, padding)
    wdata = w.data
    if padding == "valid":
        padded = (ho - bottom, wo - right)
    else:
        padded = (ho + top + bottom, wo + left + right)
    full = _scatter(x.data, wdata, stride, padded)
    if padding == "valid":
        out = np.zeros((bsz, f, ho, wo), dtype=full.dtype)
        out[:, :, : padded[0], : padded[1]] = full
    else:
        out = np.ascontiguousarray(full[:, :, top : top + ho, left : left + wo])
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    xdata = x.data

    def bw(g, needs):
        if padding == "valid":
            gp = g[:, :, : padded[0], : padded[1]]
        else:
            gp = np.pad(g, ((0, 0), (0, 0), (top, bottom), (left, right)))
        gx = _gather(gp, wdata, stride, h, wd) if needs[0] else None
        gw = _weight_grad(gp, xdata, stride, kh, kw) if needs[1] else None
        gb = g.sum(axis=(0, 2, 3)) if len(needs) > 2 and needs[2] else None
        return (gx, gw, gb)

    return custom_op(out, parents, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = BN_EPSILON) -> Tensor:
    """Per-channel normalisation over (batch, height, width).

    Batch statistics are used unless ``mean`` and ``var`` are given, in which
    case those fixed statistics are applied (inference mode).
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    xd = x.data
    g_ = gamma.data.reshape(shape)
    if mean is None:
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        v = (xc * xc).mean(axis=axes, keepdims=True)
        batch_stats = True
    else:
        mu = np.asarray(mean, dtype=xd.dtype).reshape(shape)
        xc = xd - mu
        v = np.asarray(var, dtype=xd.dtype).reshape(shape)
        batch_stats = False
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    out = xhat * g_ + beta.data.reshape(shape)
    n = xd.size // xd.shape[1]

    def bw(g, needs):
        gg = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * g_
            if batch_stats:
                gx = inv * (gxhat - gxhat.sum(axis=axes, keepdims=True) / n
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / n)
            else:
                gx = gxhat * inv
        return (gx, gg, gb)

    return custom_op(out, (x, gamma, beta), bw)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return x.leaky_relu(slope)


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


# ---------------------------------------------------------------------------
# parameter containers


def _init(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(get_default_dtype())


class Layer:
    """Base class; subclasses expose named parameters and buffers."""

    training = True

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Conv2DLayer(Layer):
    def __init__(self, in_channels: int, filters: int, kernel: int = 4, stride: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding.lower()
        self.weight = Tensor(_init(rng, (filters, in_channels, kernel, kernel), INIT_STD),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(filters, dtype=get_default_dtype()), requires_grad=True)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.weight.shape[2], self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class TranspConv2DLayer(Layer):
    def __init__(self, in_channels: int, filters: int, kernel: int = 4, stride: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding.lower()
        self.weight = Tensor(_init(rng, (in_channels, filters, kernel, kernel), INIT_STD),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(filters, dtype=get_default_dtype()), requires_grad=True)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_size(self, size: int) -> int:
        return transp_output_size(size, self.weight.shape[2], self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class BatchNormLayer(Layer):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        dt = get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: Tensor, training: bool | None = None) -> Tensor:
        training = self.training if training is None else training
        if not training:
            return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        if x.shape[0] < 2:
            raise ShapeError("batch norm in training mode needs a batch of at least 2")
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        m = self.momentum
        # in place so that buffers shared with checkpoints stay the same objects
        self.running_mean *= m
        self.running_mean += (1 - m) * x.data.mean(axis=axes).astype(self.running_mean.dtype)
        self.running_var *= m
        self.running_var += (1 - m) * x.data.var(axis=axes).astype(self.running_var.dtype)
        return batch_norm(x, self.gamma, self.beta, eps=self.eps)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, params: Iterable[tuple[str, Tensor]] | Iterable[Tensor], lr: float,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        named = []
        for i, p in enumerate(params):
            named.append(p if isinstance(p, tuple) else (f"param{i}", p))
        self.named = named
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        """Apply one update using ``grads`` (or each parameter's ``.grad``)."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.named]
        for (name, _), g in zip(self.named, grads):
            if not np.all(np.isfinite(g)):
                raise NaNGradientError(f"non-finite gradient for parameter {name!r}")
        st = self.state
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for (name, p), g in zip(self.named, grads):
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            update = (st.lr / bc1) * m / (np.sqrt(v / bc2) + st.eps)
            # rebind instead of mutating: recorded graphs may still hold the old array
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], optimizer: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in optimizer.params]:
        raise ValueError("parameters do not match the optimizer's parameter list")
    optimizer.step(grads)
