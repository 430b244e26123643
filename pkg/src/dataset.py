"""
Dataset directory convention:

    <root>/manifest.txt          one sample id per line
    <root>/train.txt, val.txt    split manifests, same format
    <root>/images/<id>.t4        f32 C×H×W
    <root>/labels/<id>.t4        u8 H×W
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from src.errors import DatasetError, T4FormatError
from src.t4_format import read_t4, read_t4_header

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
SPLITS = ("train", "val")
IMAGES_DIR = "images"
LABELS_DIR = "labels"


def sample_id(index: int) -> str:
    return f"s{index:05d}"


def _read_ids(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_split_files(root: Path, ids: list[str], splits: dict[str, list[str]]):
    (root / MANIFEST).write_text("\n".join(ids) + "\n", encoding="utf-8")
    for name, members in splits.items():
        (root / f"{name}.txt").write_text("".join(f"{i}\n" for i in members), encoding="utf-8")


@dataclass
class DatasetIndex:
    root: Path
    ids: list[str]
    splits: dict[str, list[str]] = field(default_factory=dict)
    channels: int = 3

    def __len__(self) -> int:
        return len(self.ids)

    def image_path(self, sid: str) -> Path:
        return self.root / IMAGES_DIR / f"{sid}.t4"

    def label_path(self, sid: str) -> Path:
        return self.root / LABELS_DIR / f"{sid}.t4"

    def split(self, name: str) -> list[str]:
        """Ids of a split; "all" is every id in the manifest."""
        if name == "all":
            return list(self.ids)
        if name not in self.splits:
            raise DatasetError(f"dataset {self.root} has no '{name}' split (have: {', '.join(self.splits)})")
        return list(self.splits[name])

    def load_sample(self, sid: str) -> tuple[np.ndarray, np.ndarray]:
        return read_t4(self.image_path(sid)).astype(np.float32, copy=False), read_t4(self.label_path(sid))


def load_dataset(root: Union[str, Path]) -> DatasetIndex:
    """Index a dataset directory, checking every sample pair's files, dtypes and dims."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST} in {root}")
    ids = _read_ids(manifest)
    if not ids:
        raise DatasetError(f"{manifest} lists no samples")

    channels = None
    for sid in ids:
        image_path = root / IMAGES_DIR / f"{sid}.t4"
        label_path = root / LABELS_DIR / f"{sid}.t4"
        for p in (image_path, label_path):
            if not p.exists():
                raise DatasetError(f"sample {sid}: missing {p.relative_to(root)}")
        try:
            image_dtype, image_dims = read_t4_header(image_path)
            label_dtype, label_dims = read_t4_header(label_path)
        except T4FormatError as e:
            raise DatasetError(f"sample {sid}: {e}") from e
        if image_dtype != np.dtype("<f4") or len(image_dims) != 3:
            raise DatasetError(f"sample {sid}: image must be f32 C×H×W, got {image_dtype} {image_dims}")
        if label_dtype != np.dtype("u1") or len(label_dims) != 2:
            raise DatasetError(f"sample {sid}: labels must be u8 H×W, got {label_dtype} {label_dims}")
        if image_dims[1:] != label_dims:
            raise DatasetError(f"sample {sid}: image {image_dims[1]}×{image_dims[2]} vs labels {label_dims[0]}×{label_dims[1]}")
        if channels is None:
            channels = image_dims[0]
        elif image_dims[0] != channels:
            raise DatasetError(f"sample {sid}: {image_dims[0]} channels, earlier samples have {channels}")

    known = set(ids)
    splits = {}
    for name in SPLITS:
        path = root / f"{name}.txt"
        if not path.exists():
            continue
        members = _read_ids(path)
        unknown = [sid for sid in members if sid not in known]
        if unknown:
            raise DatasetError(f"{path.name} names samples missing from {MANIFEST}: {unknown[:5]}")
        splits[name] = members
    logger.info(f"Data: indexed {len(ids)} samples in {root} (splits: {', '.join(splits) or 'none'})")
    return DatasetIndex(root, ids, splits, channels)
