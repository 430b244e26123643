"""
Boundary ground truth for boundary supervision, label resampling and label
sanity reports.

A label map is an integer array of shape H×W (or N×H×W for a batch) holding
class ids in [0, K) or the ignore id 255. A pixel is a boundary pixel when a
non-ignore pixel of a different class lies within Chebyshev distance ε.
In class mode a boundary pixel keeps its class id, except class 0 which is
stored as K so that 0 can mean "not a boundary".
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from src.config import BoundaryConfig, BoundaryMode
from src.errors import ConfigError, ShapeError
from src.utils import IGNORE_INDEX

logger = logging.getLogger(__name__)

LabelMap = np.ndarray
BoundaryMap = np.ndarray

# outside any valid id range, so they never win a max/min against a real class
_BELOW = -1
_ABOVE = 256


def _window(labels: np.ndarray, epsilon: int) -> tuple[int, ...]:
    side = 2 * epsilon + 1
    return (1,) * (labels.ndim - 2) + (side, side)


def boundary_labels(labels: LabelMap, config: BoundaryConfig) -> BoundaryMap:
    if labels.ndim not in (2, 3):
        raise ShapeError(f"label map must be H×W or N×H×W, got shape {labels.shape}")
    if config.epsilon < 1:
        raise ConfigError(f"boundary epsilon must be >= 1, got {config.epsilon}")
    lab = labels.astype(np.int16)
    ignore = labels == IGNORE_INDEX
    size = _window(labels, config.epsilon)

    hi = ndimage.maximum_filter(np.where(ignore, _BELOW, lab), size=size, mode="constant", cval=_BELOW)
    lo = ndimage.minimum_filter(np.where(ignore, _ABOVE, lab), size=size, mode="constant", cval=_ABOVE)
    edge = ~ignore & ((hi > lab) | (lo < lab))

    out = np.zeros(labels.shape, dtype=np.uint8)
    if config.mode == BoundaryMode.ZERO_ONE_BOUNDARY:
        out[edge] = 1
    elif config.mode == BoundaryMode.CLASS_BOUNDARY:
        ids = np.where(lab == 0, config.num_classes, lab)
        out[edge] = ids[edge]
    else:
        raise ConfigError("boundary extraction needs mode 'class' or 'zero-one'")
    out[ignore] = IGNORE_INDEX
    return out


def downsample_labels(labels: np.ndarray, factor: int, center: bool = False) -> np.ndarray:
    """
    Nearest-neighbor downsampling of a label or boundary map by `factor`.

    Keeps the top-left pixel of each factor×factor cell, or with `center` the
    pixel at offset factor // 2, which is where a bilinear (half-pixel) upsample
    of the coarse map reads that cell.
    """
    if factor < 1:
        raise ConfigError(f"downsampling factor must be >= 1, got {factor}")
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"label map {h}×{w} is not divisible by {factor}")
    start = factor // 2 if center else 0
    return np.ascontiguousarray(labels[..., start::factor, start::factor])


@dataclass
class LabelReport:
    num_classes: int
    out_of_range: list[int] = field(default_factory=list)
    ignore_fraction: float = 0.0
    class_counts: list[int] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.out_of_range


def validate_labels(labels: LabelMap, num_classes: int) -> LabelReport:
    flat = labels.reshape(-1).astype(np.int64)
    ignored = flat == IGNORE_INDEX
    scored = flat[~ignored]
    bad = scored[(scored < 0) | (scored >= num_classes)]
    counts = np.bincount(scored[(scored >= 0) & (scored < num_classes)], minlength=num_classes)
    report = LabelReport(
        num_classes=num_classes,
        out_of_range=sorted(int(v) for v in np.unique(bad)),
        ignore_fraction=float(ignored.mean()) if flat.size else 0.0,
        class_counts=[int(c) for c in counts],
    )
    if report.out_of_range:
        logger.debug(f"Labels: ids {report.out_of_range} fall outside 0..{num_classes - 1}")
    return report
