"""
Confusion matrices, per-class IoU / mIoU, and the report record that
collects accuracy, cost and latency for one configuration.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from src.bench import LatencyStats
from src.errors import LabelRangeError, NoScoredClassesError, ShapeError
from src.utils import IGNORE_INDEX

logger = logging.getLogger(__name__)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """K×K counts, rows = ground truth, columns = prediction; ignored gt pixels are skipped."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    gt = gt.reshape(-1).astype(np.int64)
    pred = pred.reshape(-1).astype(np.int64)
    scored = gt != ignore_index
    gt, pred = gt[scored], pred[scored]
    for name, ids in (("ground-truth", gt), ("predicted", pred)):
        bad = (ids < 0) | (ids >= num_classes)
        if bad.any():
            raise LabelRangeError(f"{name} id {int(ids[bad][0])} outside 0..{num_classes - 1}")
    counts = np.bincount(num_classes * gt + pred, minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


def miou(cm: np.ndarray) -> tuple[list[Optional[float]], float]:
    """Per-class IoU (None where TP+FP+FN = 0) and their mean over defined classes."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_class = [float(tp[c] / denom[c]) if denom[c] > 0 else None for c in range(cm.shape[0])]
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise NoScoredClassesError("no class has any ground-truth or predicted pixel")
    return per_class, float(np.mean(defined))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.diag(cm).sum() / total) if total else 0.0


@dataclass
class MetricsReport:
    per_class_iou: list[Optional[float]] = field(default_factory=list)
    miou: float = 0.0
    pixel_accuracy: float = 0.0
    # K×K counts, rows = ground truth
    cm: list[list[int]] = field(default_factory=list)
    macs: int = 0
    flops: int = 0
    elementwise_ops: int = 0
    params: int = 0
    latency: Optional[LatencyStats] = None
    config: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: np.ndarray, **kwargs) -> "MetricsReport":
        per_class, mean = miou(cm)
        return cls(
            per_class_iou=per_class, miou=mean, pixel_accuracy=pixel_accuracy(cm), cm=cm.tolist(), **kwargs
        )

    def to_dict(self) -> dict:
        record = asdict(self)
        record["latency"] = self.latency.to_dict() if self.latency is not None else None
        return record
