"""
Training objective: cross entropy on the segmentation logits plus a
λ-weighted cross entropy on the boundary logits.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src import ops
from src.config import LossConfig
from src.errors import ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class LossTerms:
    seg: Tensor
    boundary: Optional[Tensor]
    total: Tensor


def _check_targets(logits: Tensor, targets: np.ndarray, what: str):
    if logits.ndim != 4 or targets.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"{what} logits {logits.shape} do not match targets {targets.shape}")


def seg_loss(seg_logits: Tensor, labels: np.ndarray, config: LossConfig) -> Tensor:
    _check_targets(seg_logits, labels, "segmentation")
    return ops.softmax_cross_entropy(seg_logits, labels, ignore_index=config.ignore_index)


def loss_terms(
    seg_logits: Tensor,
    boundary_logits: Optional[Tensor],
    labels: np.ndarray,
    boundary_gt: Optional[np.ndarray],
    config: LossConfig,
) -> LossTerms:
    seg = seg_loss(seg_logits, labels, config)
    if boundary_logits is None:
        return LossTerms(seg, None, seg)
    if boundary_gt is None:
        raise ShapeError("boundary logits were produced but no boundary ground truth was given")
    _check_targets(boundary_logits, boundary_gt, "boundary")
    boundary = ops.softmax_cross_entropy(boundary_logits, boundary_gt, ignore_index=config.ignore_index)
    if config.lambda_ == 0:
        return LossTerms(seg, boundary, seg)
    total = ops.add(seg, ops.scale(boundary, config.lambda_))
    return LossTerms(seg, boundary, total)


def combined_loss(
    seg_logits: Tensor,
    boundary_logits: Optional[Tensor],
    labels: np.ndarray,
    boundary_gt: Optional[np.ndarray],
    config: LossConfig,
) -> Tensor:
    """seg CE + λ · boundary CE; the boundary term is absent when the model has no boundary head."""
    return loss_terms(seg_logits, boundary_logits, labels, boundary_gt, config).total
