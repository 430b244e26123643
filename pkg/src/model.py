"""
The segmentation network: a residual encoder, spatial-aware pooling of every
stage output, same-resolution fusion into a feature pyramid, one or two
upsampling branches, and the segmentation and boundary heads.

Resolutions are written as divisors of the input size: r = 16 means a map
of H/16 × W/16.
"""

import copy
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src import ops
from src.config import (
    BoundaryMode,
    BranchFusion,
    CbsOutputSize,
    KernelMode,
    ModelConfig,
    RunConfig,
    SapConfig,
    parse_config_text,
)
from src.errors import ConfigError, ShapeError
from src.layers import BasicBlock, Conv2d, ConvBN, DepthwiseSeparableBN, Module, fold_model
from src.ops import ConvSpec
from src.t4_format import read_t4, write_t4
from src.tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_CONFIG = "config.cfg"
CHECKPOINT_MANIFEST = "manifest.txt"


@dataclass
class SapOutput:
    """One pooled feature map: encoder stage (0-based) and pooling index j, pooled by 2**j."""

    resolution: int
    stage: int
    j: int
    tensor: Tensor


# ordered resolution divisor -> fused map
FusedPyramid = dict[int, Tensor]


def _log2(n: int) -> int:
    return n.bit_length() - 1


def sap_pool_counts(stage_strides: tuple[int, ...], sap: SapConfig) -> list[int]:
    if not sap.pool_to_end:
        return [sap.pool_count] * len(stage_strides)
    deepest = stage_strides[-1] * 2 ** sap.pool_count
    return [_log2(deepest // m) for m in stage_strides]


def decoder_output_stride(sap: SapConfig) -> int:
    return 8 if sap.exclude_quarter_resolution else 4


def pyramid_members(config: ModelConfig) -> dict[int, list[tuple[int, int]]]:
    """Resolution -> [(stage, j), ...] for every pooled map that reaches the decoder."""
    floor = config.output_stride
    members: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for i, (m, count) in enumerate(zip(config.encoder.stage_strides, config.pool_counts())):
        for j in range(count + 1):
            r = m * 2 ** j
            if r >= floor:
                members[r].append((i, j))
    return dict(sorted(members.items()))


def pyramid_ladder(config: ModelConfig) -> list[int]:
    """Decoder resolutions, deepest first, each half the previous, ending at the output stride."""
    ladder = sorted(pyramid_members(config), reverse=True)
    expected = [ladder[0] // 2 ** k for k in range(len(ladder))]
    if ladder != expected:
        missing = sorted(set(expected) - set(ladder))
        raise ConfigError(f"pyramid has no level at 1/{missing}; stage strides leave a gap")
    if ladder[-1] != config.output_stride:
        raise ConfigError(
            f"finest pyramid level is 1/{ladder[-1]} but the decoder output is 1/{config.output_stride}"
        )
    return ladder


def sap_kernel(kernel_mode: KernelMode, s: int) -> tuple[int, int]:
    """(kernel, padding) of an average pooling with stride s."""
    if kernel_mode == KernelMode.KERNEL_EQUALS_STRIDE:
        return s, 0
    return 2 * s + 1, s


class Stem(Module):
    """7×7 conv (stride 2, or 1 when the first stage stride is 1) then a max pool carrying the rest of that stride."""

    def __init__(self, in_channels: int, out_channels: int, first_stride: int, rng, dtype):
        conv_stride = 1 if first_stride == 1 else 2
        self.conv = ConvBN(ConvSpec.square(in_channels, out_channels, 7, stride=conv_stride, padding=3), rng, dtype)
        self.pool_factor = first_stride // conv_stride

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        f = self.pool_factor
        if f > 1:
            x = ops.max_pool2d(x, kernel=2 * f - 1, stride=f, padding=f - 1)
        return x


class EncoderStage(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, blocks: int, rng, dtype):
        self.blocks = [BasicBlock(in_channels, out_channels, stride, rng, dtype)]
        self.blocks += [BasicBlock(out_channels, out_channels, 1, rng, dtype) for _ in range(blocks - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Branch(Module):
    """Upsampling ladder from the deepest pyramid level down to the output stride."""

    def __init__(self, resolutions: list[int], width: int, rng, dtype):
        # resolutions: deepest first, output stride last
        self.resolutions = resolutions
        self.stages = {
            str(r): DepthwiseSeparableBN(2 * width, width, rng, dtype) for r in resolutions[1:]
        }

    def forward(self, pyramid: FusedPyramid) -> Tensor:
        x = pyramid[self.resolutions[0]]
        for r in self.resolutions[1:]:
            skip = pyramid.get(r)
            if skip is None:
                raise ShapeError(f"decoder needs a pyramid level at 1/{r}")
            x = ops.bilinear_resize(x, skip.shape[2], skip.shape[3])
            x = self.stages[str(r)](ops.concat_channels([x, skip]))
        return x


class MSFNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = copy.deepcopy(config)
        rng = np.random.default_rng(seed)
        enc = config.encoder
        width = config.fusion_width

        self.stem = Stem(enc.in_channels, enc.stage_channels[0], enc.stage_strides[0], rng, dtype)
        self.stages = []
        prev_c, prev_m = enc.stage_channels[0], enc.stage_strides[0]
        for c, m, blocks in zip(enc.stage_channels, enc.stage_strides, enc.blocks_per_stage):
            stride = m // prev_m
            self.stages.append(EncoderStage(prev_c, c, stride, blocks, rng, dtype))
            prev_c, prev_m = c, m

        self.members = pyramid_members(config)
        self.sap_convs = {}
        if config.sap.kernel_mode == KernelMode.DILATED_CONV_3X3:
            for r, group in self.members.items():
                for i, j in group:
                    if j == 0:
                        continue
                    s = 2 ** j
                    c = enc.stage_channels[i]
                    spec = ConvSpec.square(c, c, 3, stride=s, padding=s, dilation=s, has_bias=True)
                    self.sap_convs[f"{i}_{j}"] = Conv2d(spec, rng, dtype)

        self.mfm = {}
        for r, group in self.members.items():
            in_c = sum(enc.stage_channels[i] for i, _ in group)
            self.mfm[str(r)] = DepthwiseSeparableBN(in_c, width, rng, dtype)

        ladder = pyramid_ladder(config)
        self.branches = [Branch(ladder, width, rng, dtype) for _ in range(config.branch_count)]

        self.branch_fuse: Optional[DepthwiseSeparableBN] = None
        if config.branch_fusion == BranchFusion.CONCAT:
            self.branch_fuse = DepthwiseSeparableBN(width * config.branch_count, width, rng, dtype)

        self.seg_head = ConvBN(
            ConvSpec.square(width, config.num_classes, 1, has_bias=True), rng, dtype, bn=False, act=False
        )
        self.boundary_head: Optional[ConvBN] = None
        if config.boundary_mode != BoundaryMode.OFF:
            self.boundary_head = ConvBN(
                ConvSpec.square(width, config.boundary_classes, 1, has_bias=True), rng, dtype, bn=False, act=False
            )
        self.dtype = np.dtype(dtype)

    def forward(self, x: Tensor):
        return model_forward(self, x)

    def clone(self) -> "MSFNet":
        return copy.deepcopy(self)

    def fold(self) -> "MSFNet":
        """Eval-mode copy with every batch norm folded into its convolution."""
        folded = self.clone().eval()
        fold_model(folded)
        return folded

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable tensor and BN running statistic, keyed by dotted name."""
        arrays = {name: p.data for name, p in self.named_parameters()}
        for name, state in self.named_bn_states():
            arrays[f"{name}.running_mean"] = state.running_mean
            arrays[f"{name}.running_var"] = state.running_var
        return arrays


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MSFNet:
    model = MSFNet(config, seed=seed, dtype=dtype)
    logger.info(
        f"Model: built with {count_params(model):,} parameters, "
        f"pyramid 1/{list(model.members)} (seed {seed})"
    )
    return model


def count_params(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def encoder_forward(model: MSFNet, input: Tensor) -> list[Tensor]:
    if input.ndim != 4 or input.shape[1] != model.config.encoder.in_channels:
        raise ShapeError(
            f"expected N×{model.config.encoder.in_channels}×H×W input, got {input.shape}"
        )
    model.config.check_input(input.shape[2], input.shape[3])
    x = model.stem(input)
    outputs = []
    for stage in model.stages:
        x = stage(x)
        outputs.append(x)
    return outputs


def sap_expand(
    features: list[Tensor],
    sap: SapConfig,
    stage_strides: tuple[int, ...],
    dilated_convs: Optional[dict] = None,
) -> list[SapOutput]:
    """
    Pool each encoder output with strides 2**j, j = 0..pool_count.

    Index j = 0 is the stage output itself. Maps finer than the decoder output stride are
    dropped. In dilated mode the pooling is a learned stride-s conv from
    `dilated_convs`, keyed "<stage>_<j>".
    """
    floor = decoder_output_stride(sap)
    outputs = []
    for i, (b, m, count) in enumerate(zip(features, stage_strides, sap_pool_counts(stage_strides, sap))):
        for j in range(count + 1):
            r = m * 2 ** j
            if r < floor:
                continue
            if j == 0:
                outputs.append(SapOutput(r, i, 0, b))
                continue
            s = 2 ** j
            h, w = b.shape[2] // s, b.shape[3] // s
            if h == 0 or w == 0:
                raise ShapeError(
                    f"pooling stage {i + 1} map {b.shape[2]}×{b.shape[3]} by {s} leaves an empty map"
                )
            if sap.kernel_mode == KernelMode.DILATED_CONV_3X3:
                if dilated_convs is None or f"{i}_{j}" not in dilated_convs:
                    raise ConfigError(f"dilated pooling for stage {i + 1}, j={j} has no convolution")
                pooled = dilated_convs[f"{i}_{j}"](b)
            else:
                kernel, pad = sap_kernel(sap.kernel_mode, s)
                pooled = ops.avg_pool2d(b, kernel=kernel, stride=s, padding=pad)
            outputs.append(SapOutput(r, i, j, pooled))
    return outputs


def mfm_fuse(model: MSFNet, sap_outputs: list[SapOutput]) -> FusedPyramid:
    groups: dict[int, list[SapOutput]] = defaultdict(list)
    for out in sap_outputs:
        groups[out.resolution].append(out)
    pyramid: FusedPyramid = {}
    for r in model.members:
        group = sorted(groups.get(r, []), key=lambda o: o.stage)
        if not group:
            raise ShapeError(f"no pooled features reached resolution 1/{r}")
        fused = ops.concat_channels([o.tensor for o in group])
        pyramid[r] = model.mfm[str(r)](fused)
    return pyramid


def decoder_forward(model: MSFNet, pyramid: FusedPyramid) -> tuple[Tensor, Optional[Tensor]]:
    """(segmentation features, boundary features) at the decoder output stride."""
    maps = [branch(pyramid) for branch in model.branches]
    if model.branch_fuse is not None:
        seg = model.branch_fuse(ops.concat_channels(maps))
    else:
        seg = maps[0]
    if model.boundary_head is None:
        return seg, None
    return seg, maps[-1]


def model_forward(model: MSFNet, input: Tensor) -> tuple[Tensor, Optional[Tensor]]:
    h, w = input.shape[2], input.shape[3]
    features = encoder_forward(model, input)
    outputs = sap_expand(features, model.config.sap, model.config.encoder.stage_strides, model.sap_convs)
    pyramid = mfm_fuse(model, outputs)
    seg_features, boundary_features = decoder_forward(model, pyramid)
    seg_logits = ops.bilinear_resize(model.seg_head(seg_features), h, w)
    if boundary_features is None:
        return seg_logits, None
    boundary_logits = model.boundary_head(boundary_features)
    if model.config.cbs_output_size == CbsOutputSize.FULL_SCALE:
        boundary_logits = ops.bilinear_resize(boundary_logits, h, w)
    return seg_logits, boundary_logits


def save_checkpoint(model: MSFNet, directory: Union[str, Path], run: Optional[RunConfig] = None) -> Path:
    """Write config.cfg, manifest.txt and one f32 T4 file per named array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if run is None:
        run = RunConfig(model=copy.deepcopy(model.config))
    (directory / CHECKPOINT_CONFIG).write_text(run.to_text(), encoding="utf-8")
    lines = []
    for name, arr in model.state_arrays().items():
        write_t4(directory / f"{name}.t4", arr.astype(np.float32))
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
    (directory / CHECKPOINT_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Model: saved checkpoint with {len(lines)} arrays to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path], dtype=np.float32) -> tuple[MSFNet, RunConfig]:
    directory = Path(directory)
    cfg_path = directory / CHECKPOINT_CONFIG
    manifest_path = directory / CHECKPOINT_MANIFEST
    for p in (cfg_path, manifest_path):
        if not p.exists():
            raise ConfigError(f"checkpoint {directory} is missing {p.name}")
    run = parse_config_text(cfg_path.read_text(encoding="utf-8"), source=str(cfg_path)).validate()
    model = MSFNet(run.model, seed=0, dtype=dtype)

    params = dict(model.named_parameters())
    states = dict(model.named_bn_states())
    expected = set(params) | {f"{site}.{stat}" for site in states for stat in ("running_mean", "running_var")}
    seen = set()
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, dims = line.split()
        shape = tuple(int(d) for d in dims.split(",") if d)
        arr = read_t4(directory / f"{name}.t4")
        if arr.shape != shape:
            raise ShapeError(f"checkpoint array {name} has shape {arr.shape}, manifest says {shape}")
        arr = arr.astype(dtype)
        seen.add(name)
        if name in params:
            if params[name].shape != shape:
                raise ShapeError(f"checkpoint array {name} {shape} does not fit the model's {params[name].shape}")
            params[name].data = arr
            continue
        site, _, stat = name.rpartition(".")
        if site in states and stat in ("running_mean", "running_var"):
            setattr(states[site], stat, arr)
            continue
        raise ConfigError(f"checkpoint array {name} has no place in the model")
    missing = sorted(expected - seen)
    if missing:
        raise ConfigError(
            f"checkpoint {directory} manifest omits {len(missing)} model arrays, first {missing[0]}"
        )
    logger.info(f"Model: loaded checkpoint from {directory}")
    return model, run
