"""Neural-network operators on top of the tensor core.

Convolution is cross-correlation (no kernel flip) with taps spaced
``dilation`` pixels apart. All operators record a backward rule and are
pure functions of their arguments, except ``batch_norm`` in train mode,
which also refreshes the running statistics held in its state object.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from patchforge.errors import ContractError, InvalidShapeError
from patchforge.tensor import Tensor, grad_enabled, tensor_create

__all__ = [
    "ConvSpec",
    "BatchNormState",
    "PReLUState",
    "LossReport",
    "conv2d",
    "pool2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool2d",
    "batch_norm",
    "prelu",
    "linear",
    "concat_channels",
    "softmax",
    "softmax_cross_entropy",
    "receptive_extent",
    "batch_invariant",
]

_mode = threading.local()


def batch_invariant_enabled() -> bool:
    return getattr(_mode, "batch_invariant", False)


@contextlib.contextmanager
def batch_invariant(enabled: bool = True):
    """Compute matrix products one sample at a time inside the block.

    BLAS picks kernels by operand width, so a sample's output can change in
    the last bits with the size of the batch around it. In this mode every
    sample sees identically shaped products, making results independent of
    batch composition.
    """
    prev = batch_invariant_enabled()
    _mode.batch_invariant = enabled
    try:
        yield
    finally:
        _mode.batch_invariant = prev


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ContractError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution.

    ``padding`` is (top, bottom, left, right). The dilation rate spaces the
    kernel taps; rate 1 is an ordinary convolution.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        pad = self.padding
        if isinstance(pad, int):
            pad = (pad, pad, pad, pad)
        elif len(pad) == 2:
            pad = (pad[0], pad[0], pad[1], pad[1])
        object.__setattr__(self, "padding", tuple(int(p) for p in pad))
        if self.dilation < 1:
            raise ContractError(f"dilation must be a positive integer, got {self.dilation}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ContractError(f"invalid convolution geometry: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be >= 1")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1,
             bias: bool = True) -> "ConvSpec":
        """Stride-1 spec whose zero padding preserves the spatial size (odd kernels)."""
        if kernel % 2 != 1:
            raise ContractError("same padding needs an odd kernel")
        p = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, (kernel, kernel), (1, 1), dilation, (p, p, p, p), bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        eh, ew = receptive_extent(self)
        pt, pb, pl, pr = self.padding
        hp, wp = height + pt + pb, width + pl + pr
        if hp < eh or wp < ew:
            raise InvalidShapeError(
                f"padded input {hp}x{wp} smaller than effective kernel {eh}x{ew}")
        return (hp - eh) // self.stride[0] + 1, (wp - ew) // self.stride[1] + 1


def receptive_extent(spec: ConvSpec) -> tuple[int, int]:
    """Effective kernel extent ``dilation*(k-1)+1`` along each axis."""
    kh, kw = spec.kernel
    d = spec.dilation
    return d * (kh - 1) + 1, d * (kw - 1) + 1


def _nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise InvalidShapeError(f"{what} expects NCHW input, got shape {x.shape}")


# -- convolution --------------------------------------------------------------


def conv2d(input: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    _nchw(input, "conv2d")
    if weights.shape != spec.weight_shape:
        raise InvalidShapeError(f"weights {weights.shape} do not match spec {spec.weight_shape}")
    n, c, h, w = input.shape
    if c != spec.in_channels:
        raise InvalidShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if spec.bias != (bias is not None):
        raise InvalidShapeError("bias presence disagrees with spec")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise InvalidShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    ho, wo = spec.output_size(h, w)
    kh, kw = spec.kernel
    sh, sw = spec.stride
    d = spec.dilation
    pt, pb, pl, pr = spec.padding
    o = spec.out_channels

    x = input.data
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if any(spec.padding) else x
    hp, wp = xp.shape[2], xp.shape[3]

    # gather taps: cols[n, c, i, j, y, x] = xp[n, c, y*sh + i*d, x*sw + j*d]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            cols[:, :, i, j] = xp[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw]
    cols3 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weights.data.reshape(o, -1)
    # stacked product: one identically shaped gemm per sample
    out = np.matmul(w2, cols3).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        g3 = g.reshape(n, o, ho * wo)
        dw = None
        if weights.requires_grad:
            dw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        dx = None
        if input.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                r0 = i * d
                for j in range(kw):
                    c0 = j * d
                    dxp[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw] += dcols[:, :, i, j]
            dx = dxp[:, :, pt:hp - pb, pl:wp - pr]
        return dx, dw, db

    inputs = (input, weights) if bias is None else (input, weights, bias)
    return Tensor._wrap(out, inputs, bw, "conv2d")


# -- pooling ------------------------------------------------------------------


def _pool_geometry(x: Tensor, window, stride):
    _nchw(x, "pool2d")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise InvalidShapeError(f"invalid pooling window {window} / stride {stride}")
    h, w = x.shape[2], x.shape[3]
    if kh > h or kw > w:
        raise InvalidShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    return kh, kw, sh, sw, (h - kh) // sh + 1, (w - kw) // sw + 1


def max_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    """Max over each window; ties route the gradient to the first tap in raster order."""
    kh, kw, sh, sw, ho, wo = _pool_geometry(x, window, stride)
    xd = x.data
    offsets = [(i, j) for i in range(kh) for j in range(kw)]

    def tap(arr, i, j):
        return arr[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    record = grad_enabled() and x.requires_grad
    out = tap(xd, 0, 0).copy()
    winner = np.zeros(out.shape, dtype=np.uint8) if record else None
    for t, (i, j) in enumerate(offsets[1:], start=1):
        v = tap(xd, i, j)
        if record:
            np.putmask(winner, v > out, t)  # strict: earlier taps keep ties
        np.maximum(out, v, out=out)
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        for t, (i, j) in enumerate(offsets):
            tap(dx, i, j)[...] += g * (winner == t)
        return (dx,)

    return Tensor._wrap(out, (x,), bw, "max_pool2d")


def avg_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    kh, kw, sh, sw, ho, wo = _pool_geometry(x, window, stride)
    xd = x.data
    acc = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += xd[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    inv = xd.dtype.type(1.0 / (kh * kw))
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        gi = g * inv
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gi
        return (dx,)

    return Tensor._wrap(acc * inv, (x,), bw, "avg_pool2d")


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over each channel plane; output is N x C x 1 x 1."""
    _nchw(x, "global_avg_pool2d")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = x.data.dtype.type(1.0 / (h * w))

    def bw(g):
        return (np.broadcast_to(g * inv, (n, c, h, w)).copy(),)

    return Tensor._wrap(out, (x,), bw, "global_avg_pool2d")


def pool2d(input: Tensor, mode: str, window=2, stride=None) -> Tensor:
    if mode == "max":
        return max_pool2d(input, window, stride)
    if mode == "avg":
        return avg_pool2d(input, window, stride)
    if mode == "global_avg":
        return global_avg_pool2d(input)
    raise ContractError(f"unknown pooling mode {mode!r}")


# -- normalisation and activation ---------------------------------------------


@dataclass
class BatchNormState:
    """Learnable affine map plus running statistics for one normalisation layer."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1,
               eps: float = 1e-5) -> "BatchNormState":
        return cls(
            scale=tensor_create((channels,), value=1.0, dtype=dtype, requires_grad=True),
            shift=tensor_create((channels,), value=0.0, dtype=dtype, requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def batch_norm(input: Tensor, state: BatchNormState) -> Tensor:
    if input.ndim not in (2, 4):
        raise InvalidShapeError(f"batch_norm expects NC or NCHW input, got {input.shape}")
    c = input.shape[1]
    if c != state.channels:
        raise InvalidShapeError(f"input has {c} channels, state has {state.channels}")
    axes = (0,) if input.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if input.ndim == 2 else (1, c, 1, 1)
    x = input.data
    dt = x.dtype.type
    gamma = state.scale.data.reshape(bshape)
    beta = state.shift.data.reshape(bshape)
    eps = dt(state.eps)

    if state.training:
        m = x.size // c
        mean = x.mean(axis=axes, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = dt(1.0) / np.sqrt(var + eps)
        xhat = xc * inv
        mom = dt(state.momentum)
        unbiased = var.reshape(c) * dt(m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean.reshape(c)).astype(x.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(x.dtype)

        def bw(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, dgamma, dbeta
    else:
        mean = state.running_mean.reshape(bshape).astype(x.dtype)
        inv = dt(1.0) / np.sqrt(state.running_var.reshape(bshape).astype(x.dtype) + eps)
        xhat = (x - mean) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma + beta
    return Tensor._wrap(out, (input, state.scale, state.shift), bw, "batch_norm")


@dataclass
class PReLUState:
    """Per-channel learnable slope for negative inputs."""

    slope: Tensor

    @classmethod
    def create(cls, channels: int, init: float = 0.25, dtype=np.float32) -> "PReLUState":
        return cls(tensor_create((channels,), value=init, dtype=dtype, requires_grad=True))

    @property
    def channels(self) -> int:
        return self.slope.shape[0]


def prelu(input: Tensor, state: PReLUState) -> Tensor:
    if input.ndim < 2 or input.shape[1] != state.channels:
        raise InvalidShapeError(f"prelu: input {input.shape} vs {state.channels} slopes")
    bshape = (1, input.shape[1]) + (1,) * (input.ndim - 2)
    axes = tuple(i for i in range(input.ndim) if i != 1)
    x = input.data
    a = state.slope.data.reshape(bshape)
    neg = x < 0
    pos = x > 0
    out = np.where(neg, a * x, x)

    def bw(g):
        # derivative taken as 0 at exactly x == 0
        dx = g * pos + g * a * neg
        da = (g * x * neg).sum(axis=axes)
        return dx, da

    return Tensor._wrap(out, (input, state.slope), bw, "prelu")


# -- dense layers -------------------------------------------------------------


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``input @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {input.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    x, w = input.data, weight.data
    if batch_invariant_enabled() and x.shape[0] > 1:
        out = np.concatenate([x[i:i + 1] @ w.T for i in range(x.shape[0])], axis=0)
    else:
        out = x @ w.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        return g @ w, g.T @ x, (g.sum(axis=0) if bias is not None else None)

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return Tensor._wrap(out, inputs, bw, "linear")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise InvalidShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise InvalidShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return Tensor._wrap(out, tuple(inputs), bw, "concat_channels")


# -- loss ---------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LossReport:
    loss: Tensor
    per_sample: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    num_classes: int
    batch_size: int = field(init=False)

    def __post_init__(self):
        self.batch_size = int(self.labels.shape[0])

    @property
    def value(self) -> float:
        return self.loss.item()


def softmax_cross_entropy(logits: Tensor, labels) -> LossReport:
    """Mean negative log-softmax of the true class, with max-subtraction for stability."""
    if logits.ndim != 2:
        raise InvalidShapeError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n or n < 1:
        raise ContractError(f"expected {n} labels, got {y.shape[0]}")
    if y.min() < 0 or y.max() >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    f = logits.data
    z = f - f.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    per = logsum - z[np.arange(n), y]
    probs = np.exp(z - logsum[:, None])
    loss = np.asarray(per.mean(), dtype=f.dtype)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1
        return (d * (g / n),)

    return LossReport(Tensor._wrap(loss, (logits,), bw, "softmax_cross_entropy"),
                      per, probs, y, k)
