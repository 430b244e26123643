"""
Training loop and split evaluation.

Each step loads and augments one batch (prefetched on MSF_THREADS worker
threads), runs the forward under a tape, takes the combined loss, backprops
and applies one Adam step at the cosine-decayed learning rate. Every step
is appended to a JSON-lines log.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from src.augment import augment_sample
from src.boundary import boundary_labels, downsample_labels
from src.config import CbsOutputSize, RunConfig
from src.dataset import DatasetIndex
from src.errors import DatasetError, KitError, NonFiniteError, TrainingDivergedError
from src.losses import loss_terms
from src.metrics import MetricsReport, confusion
from src.model import MSFNet, count_params, model_forward, save_checkpoint
from src.optim import AdamState, adam_step, cosine_lr
from src.tensor import Tape, Tensor
from src.utils import derive_rng, worker_threads

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
CHECKPOINT_DIR = "checkpoint"
# fields that differ between otherwise identical runs
WALL_CLOCK_FIELDS = ("wall_ms",)
LOG_EVERY = 10


@dataclass
class TrainResult:
    log_path: Path
    checkpoint: Path
    steps: int
    history: list[dict] = field(default_factory=list)


def train_ids(dataset: DatasetIndex) -> list[str]:
    return dataset.split("train") if "train" in dataset.splits else dataset.split("all")


def total_steps(num_samples: int, run: RunConfig) -> int:
    per_epoch = math.ceil(num_samples / run.train.batch_size)
    steps = per_epoch * run.train.epochs
    if run.train.max_steps is not None:
        steps = min(steps, run.train.max_steps)
    return steps


def boundary_targets(labels: np.ndarray, model: MSFNet, run: RunConfig) -> Optional[np.ndarray]:
    """Boundary ground truth at the boundary head's resolution, or None without a boundary head."""
    if model.boundary_head is None:
        return None
    factor = 1 if model.config.cbs_output_size == CbsOutputSize.FULL_SCALE else model.config.output_stride
    # head cells are read at their centers by the half-pixel upsample
    return boundary_labels(downsample_labels(labels, factor, center=True), run.boundary)


def _load_augmented(dataset: DatasetIndex, sid: str, index: int, epoch: int, run: RunConfig):
    image, labels = dataset.load_sample(sid)
    rng = derive_rng(run.train.seed, epoch, index)
    return augment_sample(image, labels, run.train.augmentation, rng)


def _batches(dataset: DatasetIndex, ids: list[str], run: RunConfig, steps: int) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """(epoch, images, labels) per step in seeded order, one batch prefetched ahead."""
    batch_size = run.train.batch_size

    def _schedule() -> Iterator[tuple[int, list[int]]]:
        produced = 0
        epoch = 0
        while produced < steps:
            order = derive_rng(run.train.seed, epoch).permutation(len(ids))
            for start in range(0, len(order), batch_size):
                if produced == steps:
                    return
                yield epoch, [int(i) for i in order[start:start + batch_size]]
                produced += 1
            epoch += 1

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        def _submit(epoch: int, members: list[int]):
            return epoch, [pool.submit(_load_augmented, dataset, ids[i], i, epoch, run) for i in members]

        schedule = _schedule()
        pending = next(schedule, None)
        pending = _submit(*pending) if pending else None
        while pending is not None:
            epoch, futures = pending
            upcoming = next(schedule, None)
            pending = _submit(*upcoming) if upcoming else None
            samples = [f.result() for f in futures]
            yield epoch, np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples])


def fit(model: MSFNet, dataset: DatasetIndex, run: RunConfig, out_dir: Union[str, Path]) -> TrainResult:
    ids = train_ids(dataset)
    if not ids:
        raise DatasetError(f"dataset {dataset.root} has no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_FILE
    steps = total_steps(len(ids), run)
    tc = run.train
    logger.info(
        f"Train: {len(ids)} samples, batch {tc.batch_size}, {steps} steps, "
        f"{count_params(model):,} parameters, {worker_threads()} loader threads"
    )

    params = model.parameters()
    state = AdamState.for_params(params)
    history = []
    model.train()
    with open(log_path, "w", encoding="utf-8") as log:
        for step, (epoch, images, labels) in enumerate(_batches(dataset, ids, run, steps)):
            start = time.perf_counter()
            # step 0 runs at lr_max and the final step at lr_min
            lr = cosine_lr(step, max(steps - 1, 1), tc.lr_max, tc.lr_min)
            try:
                model.zero_grad()
                with Tape() as tape:
                    seg, boundary = model_forward(model, Tensor(images.astype(model.dtype)))
                    terms = loss_terms(seg, boundary, labels, boundary_targets(labels, model, run), run.loss)
                tape.backward(terms.total)
                adam_step(params, [p.grad for p in params], state, lr, tc.weight_decay)
            except NonFiniteError as e:
                raise TrainingDivergedError(step + 1, str(e)) from e

            record = {
                "step": step + 1,
                "epoch": epoch,
                "lr": lr,
                "seg_loss": terms.seg.item(),
                "boundary_loss": terms.boundary.item() if terms.boundary is not None else None,
                "total": terms.total.item(),
                "wall_ms": (time.perf_counter() - start) * 1000.0,
            }
            if not math.isfinite(record["total"]):
                raise TrainingDivergedError(step + 1, f"loss is {record['total']}")
            log.write(json.dumps(record) + "\n")
            history.append(record)
            if (step + 1) % LOG_EVERY == 0 or step + 1 == steps:
                logger.info(f"Train: step {step + 1}/{steps} lr {lr:.3e} loss {record['total']:.4f}")
            if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0 and step + 1 < steps:
                save_checkpoint(model, out_dir / "checkpoints" / f"step_{step + 1:06d}", run)

    checkpoint = save_checkpoint(model, out_dir / CHECKPOINT_DIR, run)
    return TrainResult(log_path, checkpoint, steps, history)


def predict(model: MSFNet, image: np.ndarray, channel_means) -> np.ndarray:
    """Argmax class map for one C×H×W image (mean subtraction only, no augmentation)."""
    means = np.asarray(channel_means, dtype=image.dtype).reshape(-1, 1, 1)
    x = Tensor((image - means)[None].astype(model.dtype))
    seg, _ = model_forward(model, x)
    return seg.data[0].argmax(axis=0)


def evaluate(model: MSFNet, dataset: DatasetIndex, run: RunConfig, split: str = "val") -> MetricsReport:
    """Confusion over a split in eval mode, summarized as a MetricsReport."""
    ids = dataset.split(split)
    if not ids:
        raise DatasetError(f"split '{split}' of {dataset.root} is empty")
    model.eval()
    k = model.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for sid in ids:
        image, labels = dataset.load_sample(sid)
        pred = predict(model, image, run.train.augmentation.channel_means)
        cm += confusion(pred, labels, k, run.loss.ignore_index)
    try:
        report = MetricsReport.from_confusion(cm, params=count_params(model))
    except KitError:
        logger.error(f"Eval: split '{split}' has no scored pixels")
        raise
    logger.info(f"Eval: {len(ids)} samples from '{split}', mIoU {report.miou:.4f}, pixel acc {report.pixel_accuracy:.4f}")
    return report
