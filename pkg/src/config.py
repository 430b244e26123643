"""
Configuration dataclasses and the flat key-value config format.

A config file holds one `key = value` per line, `#` starts a comment, keys
carry a section prefix (`encoder.stage_channels = 64,128,256,512`).
Unknown keys are errors. Values given with `--set key=value` override the
file, and the file overrides the preset it starts from.
"""

import copy
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from src.errors import ConfigError, ShapeError
from src.utils import IGNORE_INDEX, is_power_of_two

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).parent.parent
PRESETS_DIR = ROOT_DIR / "data" / "presets"


class KernelMode(str, Enum):
    KERNEL_EQUALS_STRIDE = "stride"
    KERNEL_TWO_S_PLUS_ONE = "2s+1"
    DILATED_CONV_3X3 = "dilated"


class BranchFusion(str, Enum):
    CONCAT = "concat"
    NONE = "none"


class BoundaryMode(str, Enum):
    CLASS_BOUNDARY = "class"
    ZERO_ONE_BOUNDARY = "zero-one"
    OFF = "off"


class CbsOutputSize(str, Enum):
    EIGHTH_SCALE = "eighth"
    FULL_SCALE = "full"


@dataclass
class EncoderConfig:
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_strides: tuple[int, ...] = (4, 8, 16, 32)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 3

    def validate(self):
        for name in ("stage_channels", "stage_strides", "blocks_per_stage"):
            values = getattr(self, name)
            if len(values) != 4:
                raise ConfigError(f"encoder.{name} needs 4 entries, got {len(values)}")
            if any(v < 1 for v in values):
                raise ConfigError(f"encoder.{name} entries must be positive, got {values}")
        strides = self.stage_strides
        if not all(is_power_of_two(m) for m in strides):
            raise ConfigError(f"encoder.stage_strides must be powers of two, got {strides}")
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"encoder.stage_strides must be strictly increasing, got {strides}")
        if self.in_channels < 1:
            raise ConfigError(f"encoder.in_channels must be positive, got {self.in_channels}")


@dataclass
class SapConfig:
    pool_count: int = 5
    pool_to_end: bool = False
    kernel_mode: KernelMode = KernelMode.KERNEL_TWO_S_PLUS_ONE
    exclude_quarter_resolution: bool = True

    def validate(self):
        if not 0 <= self.pool_count <= 5:
            raise ConfigError(f"sap.pool_count must be in 0..5, got {self.pool_count}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sap: SapConfig = field(default_factory=SapConfig)
    fusion_width: int = 128
    num_classes: int = 19
    branch_count: int = 2
    branch_fusion: BranchFusion = BranchFusion.CONCAT
    boundary_mode: BoundaryMode = BoundaryMode.CLASS_BOUNDARY
    cbs_output_size: CbsOutputSize = CbsOutputSize.EIGHTH_SCALE

    def validate(self):
        self.encoder.validate()
        self.sap.validate()
        if self.fusion_width < 1:
            raise ConfigError(f"model.fusion_width must be >= 1, got {self.fusion_width}")
        if not 2 <= self.num_classes <= 254:
            raise ConfigError(f"model.num_classes must be in 2..254, got {self.num_classes}")
        if self.branch_count not in (1, 2):
            raise ConfigError(f"model.branch_count must be 1 or 2, got {self.branch_count}")
        if self.deepest_resolution < self.output_stride:
            raise ConfigError(
                f"deepest resolution 1/{self.deepest_resolution} is finer than the decoder output 1/{self.output_stride}"
            )

    @property
    def output_stride(self) -> int:
        """Resolution divisor of the decoder's final fused map."""
        return 8 if self.sap.exclude_quarter_resolution else 4

    @property
    def deepest_resolution(self) -> int:
        return self.encoder.stage_strides[-1] * 2 ** self.sap.pool_count

    @property
    def required_multiple(self) -> int:
        """Input H and W must be multiples of the last stage stride times 2**pool_count."""
        return self.deepest_resolution

    def pool_counts(self) -> list[int]:
        """Number of SAP poolings applied after each encoder stage."""
        if not self.sap.pool_to_end:
            return [self.sap.pool_count] * 4
        deepest = self.deepest_resolution
        return [(deepest // m).bit_length() - 1 for m in self.encoder.stage_strides]

    @property
    def boundary_classes(self) -> int:
        if self.boundary_mode == BoundaryMode.CLASS_BOUNDARY:
            return self.num_classes + 1
        if self.boundary_mode == BoundaryMode.ZERO_ONE_BOUNDARY:
            return 2
        return 0

    def check_input(self, h: int, w: int):
        multiple = self.required_multiple
        if h % multiple or w % multiple:
            raise ShapeError(
                f"input {h}×{w} is not divisible by {multiple} "
                f"(last stage stride {self.encoder.stage_strides[-1]} pooled {self.sap.pool_count} times); "
                f"use a multiple of {multiple}"
            )


@dataclass
class LossConfig:
    lambda_: float = 1.0
    ignore_index: int = IGNORE_INDEX
    cbs_output_size: CbsOutputSize = CbsOutputSize.EIGHTH_SCALE

    def validate(self):
        if self.lambda_ < 0:
            raise ConfigError(f"loss.lambda must be >= 0, got {self.lambda_}")


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_min: float = 0.5
    scale_max: float = 2.0
    crop_h: int = 1024
    crop_w: int = 1024
    channel_means: tuple[float, ...] = (0.5, 0.5, 0.5)

    def validate(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"augment.flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"augment scale range [{self.scale_min}, {self.scale_max}] is invalid")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ConfigError(f"augment crop {self.crop_h}×{self.crop_w} is degenerate")


@dataclass
class TrainConfig:
    batch_size: int = 12
    weight_decay: float = 2.5e-5
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 350
    max_steps: Optional[int] = None
    seed: int = 0
    checkpoint_every: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"train.max_steps must be >= 1, got {self.max_steps}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= train.lr_min <= train.lr_max, got {self.lr_min} and {self.lr_max}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        self.augmentation.validate()


@dataclass
class BoundaryConfig:
    epsilon: int = 1
    mode: BoundaryMode = BoundaryMode.CLASS_BOUNDARY
    num_classes: int = 19

    def validate(self):
        if self.epsilon < 1:
            raise ConfigError(f"boundary.epsilon must be >= 1, got {self.epsilon}")
        if self.mode == BoundaryMode.OFF:
            raise ConfigError("boundary extraction needs mode 'class' or 'zero-one'")


@dataclass
class SynthConfig:
    num_samples: int = 64
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_shapes: int = 1
    max_shapes: int = 4
    # shape side range as fractions of the image side
    min_shape_frac: float = 0.25
    max_shape_frac: float = 0.5
    shape_kinds: tuple[str, ...] = ("rectangle", "ellipse")
    noise_sigma: float = 0.05
    val_fraction: float = 0.25
    seed: int = 0

    def validate(self):
        if self.num_samples < 1:
            raise ConfigError(f"synth.num_samples must be >= 1, got {self.num_samples}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"synth size {self.height}×{self.width} is degenerate")
        if self.num_classes < 2:
            raise ConfigError(f"synth.num_classes must be >= 2 (class 0 is background), got {self.num_classes}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"synth shape range [{self.min_shapes}, {self.max_shapes}] is invalid")
        if not 0 < self.min_shape_frac <= self.max_shape_frac <= 1:
            raise ConfigError(
                f"synth shape sizes need 0 < min_shape_frac <= max_shape_frac <= 1, "
                f"got {self.min_shape_frac}, {self.max_shape_frac}"
            )
        unknown = set(self.shape_kinds) - {"rectangle", "ellipse"}
        if unknown or not self.shape_kinds:
            raise ConfigError(f"synth.shape_kinds must be drawn from rectangle, ellipse; got {self.shape_kinds}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"synth.val_fraction must be in [0, 1), got {self.val_fraction}")


# section prefix -> attribute path inside RunConfig
SECTIONS = {
    "model": ("model",),
    "encoder": ("model", "encoder"),
    "sap": ("model", "sap"),
    "train": ("train",),
    "augment": ("train", "augmentation"),
    "loss": ("loss",),
    "boundary": ("boundary",),
    "synth": ("synth",),
}
FIELD_ALIASES = {"lambda": "lambda_"}
# fields filled from other sections, never read from a file
DERIVED_KEYS = {"loss.cbs_output_size", "boundary.mode", "boundary.num_classes"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.loss.cbs_output_size = self.model.cbs_output_size
        self.loss.validate()
        if self.model.boundary_mode != BoundaryMode.OFF:
            self.boundary.mode = self.model.boundary_mode
        self.boundary.num_classes = self.model.num_classes
        self.boundary.validate()
        self.synth.validate()
        aug = self.train.augmentation
        multiple = self.model.required_multiple
        if aug.crop_h % multiple or aug.crop_w % multiple:
            raise ConfigError(f"crop {aug.crop_h}×{aug.crop_w} must be divisible by {multiple}, the deepest pyramid resolution")
        if len(aug.channel_means) != self.model.encoder.in_channels:
            raise ConfigError(
                f"augment.channel_means has {len(aug.channel_means)} entries for "
                f"{self.model.encoder.in_channels} input channels"
            )
        return self

    def set(self, key: str, raw: str):
        obj, name, hint = _resolve_key(self, key)
        setattr(obj, name, _convert(key, raw, hint))

    def to_text(self) -> str:
        lines = []
        for prefix in SECTIONS:
            obj = _section_object(self, prefix)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if dataclasses.is_dataclass(value):
                    continue
                key = f"{prefix}.{_key_name(f.name)}"
                if key in DERIVED_KEYS:
                    continue
                lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def keys(self) -> list[str]:
        return [line.split(" = ", 1)[0] for line in self.to_text().splitlines()]


def _key_name(field_name: str) -> str:
    for alias, name in FIELD_ALIASES.items():
        if name == field_name:
            return alias
    return field_name


def _section_object(run: RunConfig, prefix: str):
    obj = run
    for attr in SECTIONS[prefix]:
        obj = getattr(obj, attr)
    return obj


def _resolve_key(run: RunConfig, key: str):
    prefix, _, name = key.partition(".")
    if prefix not in SECTIONS or not name or key in DERIVED_KEYS:
        raise ConfigError(f"unknown config key '{key}'")
    obj = _section_object(run, prefix)
    name = FIELD_ALIASES.get(name, name)
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names or dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"unknown config key '{key}'")
    return obj, name, hints[name]


def _convert(key: str, raw: str, hint):
    raw = raw.strip()
    try:
        if typing.get_origin(hint) is typing.Union:
            inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
            return None if raw.lower() == "none" else _convert(key, raw, inner)
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            return tuple(item(part.strip()) for part in raw.split(",") if part.strip())
        if hint is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(raw)
        return hint(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"invalid value {raw!r} for config key '{key}'") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, run: Optional[RunConfig] = None, source: str = "<text>") -> RunConfig:
    """Apply `key = value` lines on top of `run` (a fresh default config if None)."""
    run = copy.deepcopy(run) if run is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            run.set(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return run


def preset_path(name: str) -> Path:
    path = PRESETS_DIR / f"{name}.cfg"
    if not path.exists():
        available = ", ".join(sorted(p.stem for p in PRESETS_DIR.glob("*.cfg")))
        raise ConfigError(f"unknown preset '{name}' (available: {available})")
    return path


def load_run_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Iterable[str] = (),
) -> RunConfig:
    """Preset, then config file, then `key=value` overrides; validated."""
    overrides = list(overrides)
    run = RunConfig()
    if preset:
        p = preset_path(preset)
        run = parse_config_text(p.read_text(encoding="utf-8"), run, source=str(p))
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        run = parse_config_text(p.read_text(encoding="utf-8"), run, source=str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        run.set(key.strip(), raw)
    logger.debug(f"Config: loaded (preset={preset}, file={path}, {len(overrides)} overrides)")
    return run.validate()
