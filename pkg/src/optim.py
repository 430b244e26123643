"""
Cosine learning-rate decay and Adam with decoupled weight decay.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.errors import ConfigError, NonFiniteError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS_ADAM = 1e-8


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2, a single monotone cycle."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS_ADAM
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
):
    """
    One Adam update with bias correction, in place.

    Weight decay is decoupled: θ ← θ − lr·wd·θ happens before the moment
    update and never enters the moments. A None gradient counts as zero.
    Every gradient is checked before any parameter moves.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if not len(params) == len(grads) == len(state.m):
        raise ShapeError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment buffers")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient {i} (shape {g.shape}) is non-finite; step skipped")

    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - update).astype(p.dtype, copy=False)
