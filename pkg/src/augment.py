"""
Training-time augmentation: random scale, horizontal flip, random crop,
then mean subtraction. Image and labels always receive the same geometry.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.config import AugmentConfig
from src.errors import ConfigError, ShapeError
from src.ops import resize_matrix
from src.utils import IGNORE_INDEX

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    flip: bool
    top: int
    left: int


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def draw_augment_params(h: int, w: int, config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw scale, flip and crop offset for an h×w sample; padding goes to the bottom/right."""
    scale = float(rng.uniform(config.scale_min, config.scale_max))
    flip = bool(rng.random() < config.flip_prob)
    sh, sw = scaled_size(h, w, scale)
    top = int(rng.integers(0, max(sh - config.crop_h, 0) + 1))
    left = int(rng.integers(0, max(sw - config.crop_w, 0) + 1))
    return AugmentParams(scale, flip, top, left)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if image.shape[1:] == (out_h, out_w):
        return image
    rh = resize_matrix(image.shape[1], out_h).astype(image.dtype)
    rw = resize_matrix(image.shape[2], out_w).astype(image.dtype)
    return rh @ image @ rw.T


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest neighbor at half-pixel centers, so no new ids appear."""
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def flip_horizontal(image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1], labels[:, ::-1]


def apply_augment(
    image: np.ndarray, labels: np.ndarray, params: AugmentParams, config: AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    if image.ndim != 3 or labels.shape != image.shape[1:]:
        raise ShapeError(f"image {image.shape} and labels {labels.shape} must be C×H×W and H×W")
    if config.crop_h < 1 or config.crop_w < 1:
        raise ConfigError(f"crop {config.crop_h}×{config.crop_w} is degenerate")
    means = np.asarray(config.channel_means, dtype=image.dtype).reshape(-1, 1, 1)
    if means.shape[0] != image.shape[0]:
        raise ShapeError(f"{means.shape[0]} channel means for a {image.shape[0]}-channel image")

    sh, sw = scaled_size(image.shape[1], image.shape[2], params.scale)
    image = resize_image(image, sh, sw)
    labels = resize_labels(labels, sh, sw)
    if params.flip:
        image, labels = flip_horizontal(image, labels)

    ph, pw = max(config.crop_h, sh), max(config.crop_w, sw)
    if (ph, pw) != (sh, sw):
        padded = np.broadcast_to(means, (image.shape[0], ph, pw)).copy()
        padded[:, :sh, :sw] = image
        padded_labels = np.full((ph, pw), IGNORE_INDEX, dtype=labels.dtype)
        padded_labels[:sh, :sw] = labels
        image, labels = padded, padded_labels

    window = (slice(params.top, params.top + config.crop_h), slice(params.left, params.left + config.crop_w))
    image = image[(slice(None), *window)] - means
    labels = labels[window]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def augment_sample(
    image: np.ndarray, labels: np.ndarray, config: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    params = draw_augment_params(image.shape[1], image.shape[2], config, rng)
    return apply_augment(image, labels, params, config)
