"""
Minimal module system over the tensor core: parameter bookkeeping,
train/eval switching, and the conv/BN building blocks of the network,
including in-place batch-norm folding for inference.
"""

import logging
from typing import Iterator, Optional

import numpy as np

from src import ops
from src.ops import BatchNormState, ConvSpec
from src.tensor import Tensor

logger = logging.getLogger(__name__)


class Module:
    """Base class; submodules and parameters are discovered from attributes."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], (Module, Tensor)):
                        yield f"{name}.{key}", value[key]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def named_bn_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for name, module in self.named_modules():
            if isinstance(module, BatchNorm2d):
                yield name, module.state

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        self.weight = he_normal(rng, spec.weight_shape, fan_in, dtype)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ConvBN(Module):
    """Convolution, optional batch norm, optional ReLU; the BN folds into the conv."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, bn: bool = True, act: bool = True):
        self.conv = Conv2d(spec, rng, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype) if bn else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return ops.relu(x) if self.act else x

    def fold(self):
        if self.bn is None:
            return
        w, b = ops.fold_batch_norm(self.conv.weight, self.conv.bias, self.bn.gamma, self.bn.beta, self.bn.state)
        w.requires_grad = True
        b.requires_grad = True
        spec = self.conv.spec
        self.conv.spec = ConvSpec(
            spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w,
            spec.stride, spec.padding, spec.dilation, spec.groups, has_bias=True,
        )
        self.conv.weight, self.conv.bias = w, b
        self.bn = None


class DepthwiseSeparableBN(Module):
    """k×k depthwise conv, 1×1 pointwise conv to `out_channels`, BN, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32,
                 kernel: int = 3, stride: int = 1):
        pad = kernel // 2
        self.depthwise = Conv2d(
            ConvSpec.square(in_channels, in_channels, kernel, stride=stride, padding=pad, groups=in_channels), rng, dtype
        )
        self.pointwise = ConvBN(ConvSpec.square(in_channels, out_channels, 1), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class BasicBlock(Module):
    """Two 3×3 convolutions with a skip connection (1×1 projection when shape changes)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.conv1 = ConvBN(ConvSpec.square(in_channels, out_channels, 3, stride=stride, padding=1), rng, dtype)
        self.conv2 = ConvBN(ConvSpec.square(out_channels, out_channels, 3, padding=1), rng, dtype, act=False)
        self.shortcut: Optional[ConvBN] = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBN(ConvSpec.square(in_channels, out_channels, 1, stride=stride), rng, dtype, act=False)

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(self.conv2(self.conv1(x)), skip))


def fold_model(model: Module) -> int:
    """Fold every ConvBN's batch norm into its convolution, in place; returns the number folded."""
    folded = 0
    for _, module in list(model.named_modules()):
        if isinstance(module, ConvBN) and module.bn is not None:
            module.fold()
            folded += 1
    logger.debug(f"Layers: folded {folded} batch-norm sites")
    return folded
