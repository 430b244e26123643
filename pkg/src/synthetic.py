"""
Deterministic synthetic segmentation data: random rectangles and ellipses
painted over a class-0 background, colored by class with Gaussian noise.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union

import numpy as np

from src.config import SynthConfig
from src.dataset import (
    IMAGES_DIR,
    LABELS_DIR,
    DatasetIndex,
    sample_id,
    write_split_files,
)
from src.errors import DatasetError
from src.t4_format import write_t4
from src.utils import derive_rng, worker_threads

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
PALETTE_LOW = 0.1
PALETTE_HIGH = 0.9


def palette(num_classes: int) -> np.ndarray:
    """K×3 base colors on the smallest regular grid in [0.1, 0.9]^3 that holds K colors."""
    levels = 2
    while levels ** IMAGE_CHANNELS < num_classes:
        levels += 1
    grid = np.linspace(PALETTE_LOW, PALETTE_HIGH, levels)
    colors = list(itertools.product(grid, repeat=IMAGE_CHANNELS))[:num_classes]
    return np.asarray(colors, dtype=np.float32)


def _side(length: int, low: float, high: float, rng: np.random.Generator) -> int:
    lo = max(1, int(round(length * low)))
    hi = max(lo, int(round(length * high)))
    return int(rng.integers(lo, hi + 1))


def _paint_shape(labels: np.ndarray, kind: str, cls: int, config: SynthConfig, rng: np.random.Generator):
    h, w = labels.shape
    sh = _side(h, config.min_shape_frac, config.max_shape_frac, rng)
    sw = _side(w, config.min_shape_frac, config.max_shape_frac, rng)
    top = int(rng.integers(0, h - min(sh, h) + 1))
    left = int(rng.integers(0, w - min(sw, w) + 1))
    if kind == "rectangle":
        labels[top:top + sh, left:left + sw] = cls
        return
    rows, cols = np.ogrid[:h, :w]
    cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
    ry, rx = max(sh / 2, 0.5), max(sw / 2, 0.5)
    mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    labels[mask] = cls


def synth_sample(config: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image (3×H×W f32) and labels (H×W u8) of sample `index`; depends only on (seed, index)."""
    rng = derive_rng(config.seed, index)
    labels = np.zeros((config.height, config.width), dtype=np.uint8)
    count = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    for _ in range(count):
        kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
        cls = int(rng.integers(1, config.num_classes))
        _paint_shape(labels, kind, cls, config, rng)
    colors = palette(config.num_classes)
    image = colors[labels].transpose(2, 0, 1)
    noise = rng.normal(0.0, config.noise_sigma, size=image.shape)
    return (image + noise).astype(np.float32), labels


def gen_synthetic(config: SynthConfig, out_dir: Union[str, Path]) -> DatasetIndex:
    config.validate()
    root = Path(out_dir)
    try:
        (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        (root / LABELS_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {root}: {e}") from e

    ids = [sample_id(i) for i in range(config.num_samples)]

    def _write(index: int) -> str:
        image, labels = synth_sample(config, index)
        write_t4(root / IMAGES_DIR / f"{ids[index]}.t4", image)
        write_t4(root / LABELS_DIR / f"{ids[index]}.t4", labels)
        return ids[index]

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        list(pool.map(_write, range(config.num_samples)))

    n_val = int(round(config.num_samples * config.val_fraction))
    order = derive_rng(config.seed, config.num_samples).permutation(config.num_samples)
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    write_split_files(root, ids, {"train": train, "val": val})
    logger.info(
        f"Data: generated {config.num_samples} samples ({len(train)} train / {len(val)} val), "
        f"{config.height}×{config.width}, {config.num_classes} classes, in {root}"
    )
    return DatasetIndex(root, ids, {"train": train, "val": val}, IMAGE_CHANNELS)
