"""
Analytic cost model of the network and its run-time cross-check.

MACs are counted per layer: a convolution costs N·C_out·H'·W'·(C_in/groups)·k_h·k_w,
a bilinear resize 4 per output element. Pooling, batch norm, ReLU and adds
cost one elementwise op per output element and are reported separately.
Concatenation is free. FLOPs = 2·MACs.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.config import BoundaryMode, BranchFusion, CbsOutputSize, KernelMode, ModelConfig
from src.model import model_forward, pyramid_ladder, pyramid_members, sap_kernel
from src.ops import ConvSpec, output_extent
from src.tensor import OpTally, Tensor

logger = logging.getLogger(__name__)


@dataclass
class LayerCost:
    name: str
    macs: int = 0
    elementwise: int = 0


@dataclass
class FlopsReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def elementwise(self) -> int:
        return sum(layer.elementwise for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "macs": self.macs,
            "flops": self.flops,
            "elementwise": self.elementwise,
            "layers": [vars(layer) for layer in self.layers],
        }


class _Walker:
    """Follows tensor shapes through the network, appending one LayerCost per layer."""

    def __init__(self, n: int, fold_bn: bool):
        self.n = n
        self.fold_bn = fold_bn
        self.report = FlopsReport()

    def conv(self, name: str, spec: ConvSpec, c: int, h: int, w: int, bn: bool = True, act: bool = True):
        oh, ow = spec.output_hw(h, w)
        out = self.n * spec.out_channels * oh * ow
        elementwise = (out if bn and not self.fold_bn else 0) + (out if act else 0)
        self.report.layers.append(LayerCost(name, spec.macs(self.n, h, w), elementwise))
        return spec.out_channels, oh, ow

    def dwsep(self, name: str, c_in: int, c_out: int, h: int, w: int):
        dw = ConvSpec.square(c_in, c_in, 3, padding=1, groups=c_in)
        self.conv(f"{name}.depthwise", dw, c_in, h, w, bn=False, act=False)
        return self.conv(f"{name}.pointwise", ConvSpec.square(c_in, c_out, 1), c_in, h, w)

    def elementwise(self, name: str, count: int):
        self.report.layers.append(LayerCost(name, 0, count))

    def resize(self, name: str, c: int, oh: int, ow: int):
        self.report.layers.append(LayerCost(name, 4 * self.n * c * oh * ow, 0))


def count_flops(config: ModelConfig, dims: tuple[int, int, int, int], fold_bn: bool = True) -> FlopsReport:
    """Per-layer cost of one forward on an N×C×H×W input; `fold_bn` drops batch-norm ops."""
    config.validate()
    n, c, h, w = dims
    config.check_input(h, w)
    enc = config.encoder
    walk = _Walker(n, fold_bn)

    m1 = enc.stage_strides[0]
    conv_stride = 1 if m1 == 1 else 2
    c, h, w = walk.conv("stem.conv", ConvSpec.square(c, enc.stage_channels[0], 7, stride=conv_stride, padding=3), c, h, w)
    f = m1 // conv_stride
    if f > 1:
        h = output_extent(h, 2 * f - 1, f, f - 1)
        w = output_extent(w, 2 * f - 1, f, f - 1)
        walk.elementwise("stem.pool", n * c * h * w)

    stage_shapes = []
    prev_m = m1
    for i, (c_out, m, blocks) in enumerate(zip(enc.stage_channels, enc.stage_strides, enc.blocks_per_stage)):
        for b in range(blocks):
            stride = m // prev_m if b == 0 else 1
            name = f"stages.{i}.blocks.{b}"
            c_mid, oh, ow = walk.conv(f"{name}.conv1", ConvSpec.square(c, c_out, 3, stride=stride, padding=1), c, h, w)
            walk.conv(f"{name}.conv2", ConvSpec.square(c_out, c_out, 3, padding=1), c_mid, oh, ow, act=False)
            if stride != 1 or c != c_out:
                walk.conv(f"{name}.shortcut", ConvSpec.square(c, c_out, 1, stride=stride), c, h, w, act=False)
            walk.elementwise(f"{name}.add", n * c_out * oh * ow)
            walk.elementwise(f"{name}.relu", n * c_out * oh * ow)
            c, h, w = c_out, oh, ow
        prev_m = m
        stage_shapes.append((c, h, w))

    members = pyramid_members(config)
    ladder = pyramid_ladder(config)
    fw = config.fusion_width
    pyramid_hw = {}
    for r, group in members.items():
        in_c = 0
        for i, j in group:
            ci, hi, wi = stage_shapes[i]
            in_c += ci
            if j == 0:
                continue
            s = 2 ** j
            if config.sap.kernel_mode == KernelMode.DILATED_CONV_3X3:
                spec = ConvSpec.square(ci, ci, 3, stride=s, padding=s, dilation=s, has_bias=True)
                walk.conv(f"sap.{i}_{j}", spec, ci, hi, wi, bn=False, act=False)
            else:
                kernel, pad = sap_kernel(config.sap.kernel_mode, s)
                oh, ow = output_extent(hi, kernel, s, pad), output_extent(wi, kernel, s, pad)
                walk.elementwise(f"sap.{i}_{j}", n * ci * oh * ow)
        rh, rw = dims[2] // r, dims[3] // r
        walk.dwsep(f"mfm.{r}", in_c, fw, rh, rw)
        pyramid_hw[r] = (rh, rw)

    for b in range(config.branch_count):
        for r in ladder[1:]:
            rh, rw = pyramid_hw[r]
            walk.resize(f"branches.{b}.{r}.upsample", fw, rh, rw)
            walk.dwsep(f"branches.{b}.stages.{r}", 2 * fw, fw, rh, rw)

    oh, ow = pyramid_hw[ladder[-1]]
    if config.branch_fusion == BranchFusion.CONCAT:
        walk.dwsep("branch_fuse", fw * config.branch_count, fw, oh, ow)
    k = config.num_classes
    walk.conv("seg_head", ConvSpec.square(fw, k, 1, has_bias=True), fw, oh, ow, bn=False, act=False)
    walk.resize("seg_head.upsample", k, dims[2], dims[3])
    if config.boundary_mode != BoundaryMode.OFF:
        kb = config.boundary_classes
        walk.conv("boundary_head", ConvSpec.square(fw, kb, 1, has_bias=True), fw, oh, ow, bn=False, act=False)
        if config.cbs_output_size == CbsOutputSize.FULL_SCALE:
            walk.resize("boundary_head.upsample", kb, dims[2], dims[3])

    report = walk.report
    logger.debug(f"Flops: {len(report.layers)} layers, {report.macs:,} MACs, {report.elementwise:,} elementwise")
    return report


def tally_forward(model, dims: tuple[int, int, int, int], seed: int = 0) -> OpTally:
    """Run one eval-mode forward under an OpTally and return the recorded costs."""
    model.eval()
    x = Tensor(np.random.default_rng(seed).standard_normal(dims).astype(model.dtype))
    with OpTally() as tally:
        model_forward(model, x)
    return tally
