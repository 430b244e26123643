"""
Differentiable kernels used by the network: convolution (grouped, dilated,
depthwise separable), pooling, bilinear resize, batch normalization and its
folding, ReLU, channel concat/slice, add, scale, and softmax cross entropy.

Convolution uses an im2col view (`sliding_window_view`) contracted with
`tensordot`; average pooling and bilinear resize are separable, so both are
two small matrix products per map and their backward passes are the
transposed products.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ConfigError, EmptyTargetWarning, LabelRangeError, ShapeError
from src.tensor import Function, OpCost, Tensor
from src.utils import IGNORE_INDEX

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    """floor((size + 2p - d(k-1) - 1) / s) + 1."""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _require_rank4(x: np.ndarray, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N×C×H×W input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be a positive integer, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels {self.in_channels}->{self.out_channels} are not divisible by groups={self.groups}"
            )

    @classmethod
    def square(cls, in_channels: int, out_channels: int, kernel: int, **kwargs) -> "ConvSpec":
        return cls(in_channels, out_channels, kernel, kernel, **kwargs)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = output_extent(h, self.kernel_h, self.stride, self.padding, self.dilation)
        ow = output_extent(w, self.kernel_w, self.stride, self.padding, self.dilation)
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}×{w} yields an empty output for {self}")
        return oh, ow

    def macs(self, n: int, h: int, w: int) -> int:
        oh, ow = self.output_hw(h, w)
        return n * self.out_channels * oh * ow * (self.in_channels // self.groups) * self.kernel_h * self.kernel_w


def _col2im(dwin: np.ndarray, padded_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    """Scatter-add window gradients (N,C,Ho,Wo,kh,kw) back onto the padded input."""
    n, c, oh, ow, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride] += dwin[..., i, j]
    return dxp


class Conv2d(Function):
    def forward(self, x, w, b=None, *, spec: ConvSpec):
        _require_rank4(x, "conv2d")
        n, c, h, wd = x.shape
        if c != spec.in_channels:
            raise ShapeError(f"conv2d input has {c} channels, spec expects {spec.in_channels}")
        if w.shape != spec.weight_shape:
            raise ShapeError(f"conv2d weight shape {w.shape} does not match spec {spec.weight_shape}")
        if b is not None and b.shape != (spec.out_channels,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {spec.out_channels} outputs")
        oh, ow = spec.output_hw(h, wd)

        p, s, d = spec.padding, spec.stride, spec.dilation
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        kh_eff = d * (spec.kernel_h - 1) + 1
        kw_eff = d * (spec.kernel_w - 1) + 1
        win = sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))[:, :, ::s, ::s, ::d, ::d][:, :, :oh, :ow]

        g = spec.groups
        if g == 1:
            out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        else:
            cg, og = c // g, spec.out_channels // g
            win_g = win.reshape(n, g, cg, oh, ow, spec.kernel_h, spec.kernel_w)
            w_g = w.reshape(g, og, cg, spec.kernel_h, spec.kernel_w)
            out = np.einsum("ngchwij,gocij->ngohw", win_g, w_g, optimize=True).reshape(n, spec.out_channels, oh, ow)
        out = np.ascontiguousarray(out)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)

        self.spec = spec
        self.win = win
        self.w = w
        self.has_bias = b is not None
        self.x_shape = x.shape
        self.padded_shape = xp.shape
        self.in_shape = (n, c, h, wd)
        return out

    def backward(self, grad):
        spec, win, w = self.spec, self.win, self.w
        n, c, oh, ow = self.in_shape[0], self.in_shape[1], grad.shape[2], grad.shape[3]
        g = spec.groups
        if g == 1:
            dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
            dwin = np.tensordot(grad, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            cg, og = c // g, spec.out_channels // g
            kh, kw = spec.kernel_h, spec.kernel_w
            grad_g = grad.reshape(n, g, og, oh, ow)
            win_g = win.reshape(n, g, cg, oh, ow, kh, kw)
            w_g = w.reshape(g, og, cg, kh, kw)
            dw = np.einsum("ngohw,ngchwij->gocij", grad_g, win_g, optimize=True).reshape(w.shape)
            dwin = np.einsum("ngohw,gocij->ngchwij", grad_g, w_g, optimize=True).reshape(n, c, oh, ow, kh, kw)

        dxp = _col2im(dwin, self.padded_shape, spec.stride, spec.dilation)
        p = spec.padding
        dx = dxp[:, :, p:p + self.in_shape[2], p:p + self.in_shape[3]] if p else dxp
        grads = [np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False)]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)

    def cost(self, out):
        return OpCost(macs=self.spec.macs(self.in_shape[0], self.in_shape[2], self.in_shape[3]))


def conv2d(input: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with stride, zero padding, dilation and groups."""
    if bias is None:
        return Conv2d.apply(input, weights, spec=spec)
    return Conv2d.apply(input, weights, bias, spec=spec)


def depthwise_separable_conv(
    input: Tensor,
    dw_weights: Tensor,
    pw_weights: Tensor,
    bias: Optional[Tensor],
    kernel: int,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Per-channel k×k convolution followed by a 1×1 channel mix; bias belongs to the 1×1 stage."""
    c = input.shape[1]
    dw_spec = ConvSpec.square(c, c, kernel, stride=stride, padding=padding, groups=c)
    pw_spec = ConvSpec.square(c, pw_weights.shape[0], 1, has_bias=bias is not None)
    return conv2d(conv2d(input, dw_weights, None, dw_spec), pw_weights, bias, pw_spec)


# ---------------------------------------------------------------------------
# Pooling and resizing
# ---------------------------------------------------------------------------

def pool_matrix(size: int, kernel: int, stride: int, padding: int) -> np.ndarray:
    """0/1 matrix (out, size) marking which unpadded positions each window covers."""
    out = output_extent(size, kernel, stride, padding)
    if out < 1:
        raise ShapeError(f"pooling k={kernel} s={stride} p={padding} on extent {size} yields an empty output")
    m = np.zeros((out, size))
    for o in range(out):
        start = o * stride - padding
        lo, hi = max(start, 0), min(start + kernel, size)
        if hi <= lo:
            raise ShapeError(f"pooling window {o} on extent {size} covers only padding")
        m[o, lo:hi] = 1.0
    return m


class AvgPool2d(Function):
    def forward(self, x, *, kernel: int, stride: int, padding: int):
        _require_rank4(x, "avg_pool2d")
        mh = pool_matrix(x.shape[2], kernel, stride, padding).astype(x.dtype)
        mw = pool_matrix(x.shape[3], kernel, stride, padding).astype(x.dtype)
        counts = np.outer(mh.sum(axis=1), mw.sum(axis=1))
        self.mh, self.mw, self.counts = mh, mw, counts
        return (mh @ x @ mw.T) / counts

    def backward(self, grad):
        return (self.mh.T @ (grad / self.counts) @ self.mw,)


def avg_pool2d(input: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Average pooling; padded positions are excluded from each window's divisor."""
    return AvgPool2d.apply(input, kernel=kernel, stride=stride, padding=padding)


class MaxPool2d(Function):
    def forward(self, x, *, kernel: int, stride: int, padding: int):
        _require_rank4(x, "max_pool2d")
        n, c, h, w = x.shape
        oh, ow = output_extent(h, kernel, stride, padding), output_extent(w, kernel, stride, padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"max_pool2d k={kernel} s={stride} p={padding} on {h}×{w} yields an empty output")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        flat = win.reshape(n, c, oh, ow, kernel * kernel)
        self.idx = np.argmax(flat, axis=-1)[..., None]
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.padded_shape, self.in_shape = xp.shape, x.shape
        return np.take_along_axis(flat, self.idx, axis=-1)[..., 0]

    def backward(self, grad):
        n, c, oh, ow = grad.shape
        k = self.kernel
        dflat = np.zeros((n, c, oh, ow, k * k), dtype=grad.dtype)
        np.put_along_axis(dflat, self.idx, grad[..., None], axis=-1)
        dxp = _col2im(dflat.reshape(n, c, oh, ow, k, k), self.padded_shape, self.stride, 1)
        p = self.padding
        return (np.ascontiguousarray(dxp[:, :, p:p + self.in_shape[2], p:p + self.in_shape[3]]),)


def max_pool2d(input: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Max pooling; padding never wins, ties go to the first element of the window."""
    return MaxPool2d.apply(input, kernel=kernel, stride=stride, padding=padding)


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Bilinear interpolation weights (out, in), half-pixel centers, edge clamped."""
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"resize extents must be >= 1, got {in_size} -> {out_size}")
    scale = in_size / out_size
    m = np.zeros((out_size, in_size))
    for o in range(out_size):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


class BilinearResize(Function):
    def forward(self, x, *, out_h: int, out_w: int):
        _require_rank4(x, "bilinear_resize")
        self.rh = resize_matrix(x.shape[2], out_h).astype(x.dtype)
        self.rw = resize_matrix(x.shape[3], out_w).astype(x.dtype)
        return self.rh @ x @ self.rw.T

    def backward(self, grad):
        return (self.rh.T @ grad @ self.rw,)

    def cost(self, out):
        return OpCost(macs=4 * int(out.size))


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    return BilinearResize.apply(input, out_h=out_h, out_w=out_w)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics of one BN site."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def update(self, mean: np.ndarray, var: np.ndarray, count: int):
        unbiased = var * count / (count - 1) if count > 1 else var
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, *, mean, var, eps):
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) * self.inv.reshape(1, -1, 1, 1)
        self.gamma = gamma
        return self.xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        m = grad.size // grad.shape[1]
        dgamma = (grad * self.xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma.reshape(1, -1, 1, 1)
        dx = (self.inv.reshape(1, -1, 1, 1) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(1, -1, 1, 1)
            - self.xhat * (dxhat * self.xhat).sum(axis=axes).reshape(1, -1, 1, 1)
        )
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, *, mean, var, eps):
        self.scale = gamma / np.sqrt(var + eps)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) / np.sqrt(var + eps).reshape(1, -1, 1, 1)
        return x * self.scale.reshape(1, -1, 1, 1) + (beta - mean * self.scale).reshape(1, -1, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        return grad * self.scale.reshape(1, -1, 1, 1), (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps_bn: Optional[float] = None,
) -> Tensor:
    """Per-channel normalization; train mode uses batch statistics and updates `state`."""
    _require_rank4(input.data, "batch_norm")
    c = input.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.channels != c:
        raise ShapeError(
            f"batch_norm over {c} channels got gamma {gamma.shape}, beta {beta.shape}, state of {state.channels}"
        )
    eps = state.eps if eps_bn is None else eps_bn
    if training:
        x = input.data
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        out = BatchNormTrain.apply(input, gamma, beta, mean=mean, var=var, eps=eps)
        state.update(mean, var, x.size // c)
        return out
    return BatchNormEval.apply(
        input, gamma, beta,
        mean=state.running_mean.astype(input.dtype), var=state.running_var.astype(input.dtype), eps=eps,
    )


def fold_batch_norm(
    conv_weights: Tensor,
    conv_bias: Optional[Tensor],
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    eps_bn: Optional[float] = None,
) -> tuple[Tensor, Tensor]:
    """Weights and bias W', b' with conv(x, W', b') == bn_eval(conv(x, W, b))."""
    eps = state.eps if eps_bn is None else eps_bn
    denom = state.running_var.astype(np.float64) + eps
    if np.any(denom <= 0):
        raise ConfigError("cannot fold batch norm: running variance + eps is not positive")
    scale = gamma.data.astype(np.float64) / np.sqrt(denom)
    w = conv_weights.data.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    b = np.zeros(conv_weights.shape[0]) if conv_bias is None else conv_bias.data.astype(np.float64)
    b = (b - state.running_mean) * scale + beta.data
    dtype = conv_weights.dtype
    return Tensor(w.astype(dtype), requires_grad=conv_weights.requires_grad), Tensor(b.astype(dtype))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(input: Tensor) -> Tensor:
    return Relu.apply(input)


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


class Scale(Function):
    def forward(self, x, *, factor: float):
        self.factor = factor
        return x * np.asarray(factor, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


def scale(input: Tensor, factor: float) -> Tensor:
    return Scale.apply(input, factor=factor)


class ConcatChannels(Function):
    def forward(self, *xs):
        for x in xs:
            _require_rank4(x, "concat_channels")
        first = xs[0]
        for x in xs[1:]:
            if (x.shape[0], x.shape[2], x.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
                raise ShapeError(f"concat_channels spatial mismatch: {first.shape} vs {x.shape}")
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))

    def cost(self, out):
        return OpCost()


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    return ConcatChannels.apply(*inputs)


class SliceChannels(Function):
    def forward(self, x, *, start: int, stop: int):
        _require_rank4(x, "slice_channels")
        if not 0 <= start < stop <= x.shape[1]:
            raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")
        self.start, self.stop, self.in_shape = start, stop, x.shape
        return x[:, start:stop].copy()

    def backward(self, grad):
        dx = np.zeros(self.in_shape, dtype=grad.dtype)
        dx[:, self.start:self.stop] = grad
        return (dx,)

    def cost(self, out):
        return OpCost()


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(input, start=start, stop=stop)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

class SoftmaxCrossEntropy(Function):
    def forward(self, logits, *, targets: np.ndarray, ignore_index: int):
        _require_rank4(logits, "softmax_cross_entropy")
        n, k, h, w = logits.shape
        if targets.shape != (n, h, w):
            raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
        valid = targets != ignore_index
        bad = valid & ((targets < 0) | (targets >= k))
        if bad.any():
            raise LabelRangeError(f"target id {int(targets[bad].max())} outside [0, {k}) and not ignore {ignore_index}")

        m = logits.max(axis=1, keepdims=True)
        shifted = logits - m
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        safe = np.where(valid, targets, 0).astype(np.int64)
        picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]

        self.count = int(valid.sum())
        self.valid, self.safe, self.logp = valid, safe, logp
        if self.count == 0:
            warnings.warn("every target position is ignore_index; loss is 0", EmptyTargetWarning, stacklevel=4)
            logger.warning("Loss: every target position is ignored, reporting 0")
            return np.zeros((), dtype=logits.dtype)
        return np.asarray(-(picked * valid).sum() / self.count, dtype=logits.dtype)

    def backward(self, grad):
        if self.count == 0:
            return (np.zeros_like(self.logp),)
        d = np.exp(self.logp)
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, self.safe[:, None], 1.0, axis=1)
        d = (d - onehot) * self.valid[:, None] * (grad / self.count)
        return (d.astype(self.logp.dtype, copy=False),)

    def cost(self, out):
        return OpCost()


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax(logits)[target] over non-ignored positions."""
    return SoftmaxCrossEntropy.apply(logits, targets=np.asarray(targets), ignore_index=ignore_index)
