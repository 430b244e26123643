"""
Tests for the network: construction, the pooled-pyramid shape law, decoder
wiring, end-to-end gradients and checkpoints.
"""

import numpy as np
import pytest

from src import ops
from src.config import (
    BoundaryMode,
    BranchFusion,
    CbsOutputSize,
    EncoderConfig,
    KernelMode,
    LossConfig,
    ModelConfig,
    SapConfig,
)
from src.errors import ConfigError, ShapeError
from src.grad_check import grad_check
from src.losses import combined_loss
from src.model import (
    build_model,
    count_params,
    decoder_forward,
    encoder_forward,
    load_checkpoint,
    mfm_fuse,
    model_forward,
    pyramid_ladder,
    pyramid_members,
    sap_expand,
    save_checkpoint,
)
from src.tensor import Tape, Tensor


def expected_param_count(config: ModelConfig) -> int:
    """Per-layer parameter formula, summed by hand."""
    enc = config.encoder
    fw = config.fusion_width

    def conv(ci, co, k, groups=1, bias=False):
        return co * (ci // groups) * k * k + (co if bias else 0)

    def dwsep(ci, co):
        return conv(ci, ci, 3, groups=ci) + conv(ci, co, 1) + 2 * co

    total = conv(enc.in_channels, enc.stage_channels[0], 7) + 2 * enc.stage_channels[0]
    prev_c, prev_m = enc.stage_channels[0], enc.stage_strides[0]
    for c, m, blocks in zip(enc.stage_channels, enc.stage_strides, enc.blocks_per_stage):
        for b in range(blocks):
            ci = prev_c if b == 0 else c
            stride = m // prev_m if b == 0 else 1
            total += conv(ci, c, 3) + 2 * c + conv(c, c, 3) + 2 * c
            if stride != 1 or ci != c:
                total += conv(ci, c, 1) + 2 * c
        prev_c, prev_m = c, m

    members = pyramid_members(config)
    for group in members.values():
        if config.sap.kernel_mode == KernelMode.DILATED_CONV_3X3:
            total += sum(conv(enc.stage_channels[i], enc.stage_channels[i], 3, bias=True) for i, j in group if j)
        total += dwsep(sum(enc.stage_channels[i] for i, _ in group), fw)
    total += config.branch_count * (len(members) - 1) * dwsep(2 * fw, fw)
    if config.branch_fusion == BranchFusion.CONCAT:
        total += dwsep(fw * config.branch_count, fw)
    total += conv(fw, config.num_classes, 1, bias=True)
    if config.boundary_mode != BoundaryMode.OFF:
        total += conv(fw, config.boundary_classes, 1, bias=True)
    return total


def tiny_default_strides(**overrides) -> ModelConfig:
    config = ModelConfig(
        encoder=EncoderConfig(stage_channels=(8, 16, 32, 64), stage_strides=(4, 8, 16, 32), blocks_per_stage=(2, 2, 2, 2)),
        sap=SapConfig(pool_count=2),
        fusion_width=16,
        num_classes=3,
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig(), seed=0)


# ============================================================================
# Construction
# ============================================================================

class TestBuild:
    def test_default_parameter_count(self, default_model):
        n = count_params(default_model)
        assert n > 11e6
        assert n == expected_param_count(ModelConfig())

    def test_tiny_parameter_count(self):
        config = tiny_default_strides()
        n = count_params(build_model(config))
        assert n < 200_000
        assert n == expected_param_count(config)

    @pytest.mark.parametrize("overrides", [
        {"branch_count": 1, "branch_fusion": BranchFusion.NONE},
        {"boundary_mode": BoundaryMode.ZERO_ONE_BOUNDARY},
        {"boundary_mode": BoundaryMode.OFF},
        {"sap": SapConfig(pool_count=1, kernel_mode=KernelMode.DILATED_CONV_3X3)},
        {"sap": SapConfig(pool_count=2, pool_to_end=True)},
    ])
    def test_variant_parameter_counts(self, overrides):
        config = tiny_default_strides(**overrides)
        assert count_params(build_model(config)) == expected_param_count(config)

    def test_fusion_width_increases_count(self):
        small = count_params(build_model(tiny_default_strides(fusion_width=16)))
        large = count_params(build_model(tiny_default_strides(fusion_width=32)))
        assert large > small

    def test_encoder_count_independent_of_classes(self):
        def encoder_params(k):
            model = build_model(tiny_default_strides(num_classes=k))
            return sum(p.size for name, p in model.named_parameters() if name.startswith(("stem.", "stages.")))

        assert encoder_params(3) == encoder_params(11)

    def test_same_seed_same_parameters(self, tiny_config):
        a, b = build_model(tiny_config(), seed=3), build_model(tiny_config(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self, tiny_config):
        a, b = build_model(tiny_config(), seed=3), build_model(tiny_config(), seed=4)
        assert not np.array_equal(a.stem.conv.conv.weight.data, b.stem.conv.conv.weight.data)

    def test_pool_count_out_of_range(self, tiny_config):
        with pytest.raises(ConfigError):
            build_model(tiny_config(sap__pool_count=6))

    def test_pyramid_gap_rejected(self):
        config = tiny_default_strides(sap=SapConfig(pool_count=0))
        config.encoder.stage_strides = (4, 8, 32, 64)
        with pytest.raises(ConfigError, match="gap"):
            build_model(config)

    def test_pyramid_must_reach_output_stride(self):
        config = tiny_default_strides(sap=SapConfig(pool_count=0))
        config.encoder.stage_strides = (16, 32, 64, 128)
        with pytest.raises(ConfigError, match="decoder output"):
            pyramid_ladder(config)


# ============================================================================
# Pyramid and shape law
# ============================================================================

class TestPyramid:
    def test_default_resolution_set(self):
        config = ModelConfig()
        expected = {m * 2 ** j for m in config.encoder.stage_strides for j in range(6)} - {4}
        assert set(pyramid_members(config)) == expected
        assert min(expected) == 8 and max(expected) == 1024

    def test_default_sixteenth_group(self, default_model):
        """B1 pooled twice, B2 pooled once and B3 raw meet at 1/16: 64 + 128 + 256 channels."""
        assert pyramid_members(ModelConfig())[16] == [(0, 2), (1, 1), (2, 0)]
        assert default_model.mfm["16"].depthwise.spec.in_channels == 448

    def test_default_branch_has_seven_stages(self, default_model):
        for branch in default_model.branches:
            assert len(branch.stages) == 7

    def test_quarter_resolution_kept_when_not_excluded(self):
        config = tiny_default_strides(sap=SapConfig(pool_count=1, exclude_quarter_resolution=False))
        assert min(pyramid_members(config)) == 4
        assert pyramid_ladder(config)[-1] == 4

    def test_pool_to_end_meets_at_deepest(self):
        config = tiny_default_strides(sap=SapConfig(pool_count=1, pool_to_end=True))
        assert config.pool_counts() == [4, 3, 2, 1]
        assert pyramid_members(config)[64] == [(0, 4), (1, 3), (2, 2), (3, 1)]

    def test_single_pool_reaches_sixteenth(self):
        """A stride-8 stage pooled once on a 1024 input gives a 64 map."""
        strides = (4, 8, 16, 32)
        features = [Tensor(np.zeros((1, 1, 1024 // m, 1024 // m), dtype=np.float32)) for m in strides]
        outputs = sap_expand(features, SapConfig(pool_count=1), strides)
        pooled = next(o for o in outputs if o.stage == 1 and o.j == 1)
        assert pooled.resolution == 16
        assert pooled.tensor.shape[2:] == (64, 64)

    def test_unpooled_output_is_the_stage_output(self):
        strides = (4, 8, 16, 32)
        features = [Tensor(np.ones((1, 1, 64 // m, 64 // m), dtype=np.float32)) for m in strides]
        outputs = sap_expand(features, SapConfig(pool_count=1), strides)
        for o in outputs:
            if o.j == 0:
                assert o.tensor is features[o.stage]

    @pytest.mark.parametrize("mode", [KernelMode.KERNEL_EQUALS_STRIDE, KernelMode.KERNEL_TWO_S_PLUS_ONE])
    def test_constant_map_stays_constant(self, mode):
        strides = (4, 8, 16, 32)
        features = [Tensor(np.full((1, 2, 128 // m, 128 // m), 1.5, dtype=np.float32)) for m in strides]
        for o in sap_expand(features, SapConfig(pool_count=2, kernel_mode=mode), strides):
            np.testing.assert_allclose(o.tensor.data, 1.5, rtol=1e-6)

    def test_empty_map_rejected(self):
        strides = (4, 8, 16, 32)
        features = [Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32)) for _ in strides]
        with pytest.raises(ShapeError):
            sap_expand(features, SapConfig(pool_count=2), strides)


def random_config(rng) -> ModelConfig:
    strides = [(1, 2, 4, 8), (2, 4, 8, 16), (4, 8, 16, 32)][int(rng.integers(3))]
    return ModelConfig(
        encoder=EncoderConfig(
            stage_channels=tuple(int(c) for c in rng.integers(2, 5, size=4)),
            stage_strides=strides,
            blocks_per_stage=(1, 1, 1, 1),
        ),
        sap=SapConfig(
            pool_count=int(rng.integers(0, 4)),
            pool_to_end=bool(rng.random() < 0.3),
            kernel_mode=list(KernelMode)[int(rng.integers(3))],
            exclude_quarter_resolution=bool(rng.random() < 0.7),
        ),
        fusion_width=int(rng.integers(2, 5)),
        num_classes=int(rng.integers(2, 5)),
        branch_count=int(rng.integers(1, 3)),
        branch_fusion=list(BranchFusion)[int(rng.integers(2))],
        boundary_mode=list(BoundaryMode)[int(rng.integers(3))],
        cbs_output_size=list(CbsOutputSize)[int(rng.integers(2))],
    )


class TestShapeLaw:
    @pytest.mark.parametrize("trial", range(50))
    def test_random_config(self, trial):
        rng = np.random.default_rng(1000 + trial)
        config = random_config(rng)
        multiple = config.required_multiple
        h = multiple * (1 if multiple >= 128 else int(rng.integers(1, 3)))
        w = multiple * (1 if multiple >= 128 else int(rng.integers(1, 3)))
        model = build_model(config, seed=trial).eval()
        x = Tensor(rng.standard_normal((1, config.encoder.in_channels, h, w)).astype(np.float32))

        features = encoder_forward(model, x)
        for b, m, c in zip(features, config.encoder.stage_strides, config.encoder.stage_channels):
            assert b.shape == (1, c, h // m, w // m)

        outputs = sap_expand(features, config.sap, config.encoder.stage_strides, model.sap_convs)
        for o in outputs:
            r = config.encoder.stage_strides[o.stage] * 2 ** o.j
            assert o.resolution == r
            assert o.tensor.shape[2:] == (h // r, w // r)

        expected = {
            m * 2 ** j
            for m, count in zip(config.encoder.stage_strides, config.pool_counts())
            for j in range(count + 1)
        }
        expected = {r for r in expected if r >= config.output_stride}
        pyramid = mfm_fuse(model, outputs)
        assert set(pyramid) == expected
        for r, f in pyramid.items():
            assert f.shape == (1, config.fusion_width, h // r, w // r)

        seg, boundary = model_forward(model, x)
        assert seg.shape == (1, config.num_classes, h, w)
        if config.boundary_mode == BoundaryMode.OFF:
            assert boundary is None
        else:
            if config.cbs_output_size == CbsOutputSize.FULL_SCALE:
                bh, bw = h, w
            else:
                bh, bw = h // config.output_stride, w // config.output_stride
            assert boundary.shape == (1, config.boundary_classes, bh, bw)


# ============================================================================
# Forward
# ============================================================================

class TestForward:
    def test_stage_shapes(self):
        config = tiny_default_strides(sap=SapConfig(pool_count=3))
        model = build_model(config).eval()
        features = encoder_forward(model, Tensor(np.zeros((1, 3, 256, 256), dtype=np.float32)))
        assert [f.shape[2] for f in features] == [64, 32, 16, 8]

    def test_indivisible_input_names_required_multiple(self, default_model):
        with pytest.raises(ShapeError, match="1024"):
            encoder_forward(default_model, Tensor(np.zeros((1, 3, 250, 250), dtype=np.float32)))

    def test_wrong_channel_count(self, tiny_config):
        model = build_model(tiny_config())
        with pytest.raises(ShapeError):
            model_forward(model, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))

    def test_output_shapes_class_boundary(self):
        model = build_model(tiny_default_strides(sap=SapConfig(pool_count=3))).eval()
        seg, boundary = model_forward(model, Tensor(np.zeros((1, 3, 256, 256), dtype=np.float32)))
        assert seg.shape == (1, 3, 256, 256)
        assert boundary.shape == (1, 4, 32, 32)

    def test_boundary_off(self, tiny_config):
        model = build_model(tiny_config(boundary_mode=BoundaryMode.OFF)).eval()
        _, boundary = model_forward(model, Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert boundary is None
        assert model.boundary_head is None

    def test_zero_one_boundary_channels(self, tiny_config):
        model = build_model(tiny_config(boundary_mode=BoundaryMode.ZERO_ONE_BOUNDARY)).eval()
        _, boundary = model_forward(model, Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert boundary.shape[1] == 2

    def test_full_scale_boundary(self, tiny_config):
        model = build_model(tiny_config(cbs_output_size=CbsOutputSize.FULL_SCALE)).eval()
        _, boundary = model_forward(model, Tensor(np.zeros((2, 3, 32, 64), dtype=np.float32)))
        assert boundary.shape == (2, 4, 32, 64)

    def test_zero_gammas_constant_input_is_finite(self, tiny_config):
        model = build_model(tiny_config())
        for _, module in model.named_modules():
            if hasattr(module, "gamma"):
                module.gamma.data[:] = 0.0
        seg, boundary = model_forward(model, Tensor(np.full((2, 3, 32, 32), 0.5, dtype=np.float32)))
        assert np.isfinite(seg.data).all() and np.isfinite(boundary.data).all()

    def test_single_branch_feeds_both_heads(self, tiny_config):
        model = build_model(tiny_config(branch_count=1, branch_fusion=BranchFusion.NONE)).eval()
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32))
        outputs = sap_expand(encoder_forward(model, x), model.config.sap, model.config.encoder.stage_strides)
        seg_features, boundary_features = decoder_forward(model, mfm_fuse(model, outputs))
        assert seg_features is boundary_features

    def test_branches_are_parameter_independent(self, tiny_config):
        """The boundary loss reaches only the second branch when the branches are not fused."""
        model = build_model(tiny_config(branch_fusion=BranchFusion.NONE))
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        model.zero_grad()
        with Tape() as tape:
            _, boundary = model_forward(model, x)
            loss = ops.softmax_cross_entropy(boundary, rng.integers(0, 4, (2, 4, 4)))
        tape.backward(loss)
        assert all(p.grad is None for p in model.branches[0].parameters())
        assert all(p.grad is None for p in model.seg_head.parameters())
        assert any(p.grad is not None for p in model.branches[1].parameters())

    def test_folded_model_matches(self, tiny_config):
        model = build_model(tiny_config(), seed=2, dtype=np.float64)
        rng = np.random.default_rng(5)
        for _, state in model.named_bn_states():
            state.running_mean = rng.standard_normal(state.channels)
            state.running_var = rng.uniform(1e-3, 2.0, state.channels)
        model.eval()
        folded = model.fold()
        assert not list(folded.named_bn_states())
        assert list(model.named_bn_states())
        for _ in range(10):
            x = Tensor(rng.standard_normal((1, 3, 32, 32)))
            ref_seg, ref_b = model_forward(model, x)
            seg, b = model_forward(folded, x)
            np.testing.assert_allclose(seg.data, ref_seg.data, atol=1e-5)
            np.testing.assert_allclose(b.data, ref_b.data, atol=1e-5)

    @pytest.mark.slow
    def test_default_model_fold_covers_every_site(self):
        model = build_model(ModelConfig(), seed=0, dtype=np.float64)
        rng = np.random.default_rng(6)
        sites = 0
        for _, state in model.named_bn_states():
            state.running_mean = rng.standard_normal(state.channels)
            state.running_var = rng.uniform(1e-3, 2.0, state.channels)
            sites += 1
        model.eval()
        folded = model.fold()
        assert sites > 0 and not list(folded.named_bn_states())
        for _ in range(10):
            x = Tensor(rng.standard_normal((1, 3, 1024, 1024)))
            ref_seg, ref_b = model_forward(model, x)
            seg, b = model_forward(folded, x)
            np.testing.assert_allclose(seg.data, ref_seg.data, atol=1e-5)
            np.testing.assert_allclose(b.data, ref_b.data, atol=1e-5)


class TestReproducibility:
    def _gradients(self, config, x, labels, boundary_gt):
        model = build_model(config, seed=4)
        with Tape() as tape:
            seg, boundary = model_forward(model, Tensor(x))
            loss = combined_loss(seg, boundary, labels, boundary_gt, LossConfig())
        tape.backward(loss)
        return [p.grad for p in model.parameters()]

    def test_same_seed_bitwise_gradients(self, tiny_config):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        labels = rng.integers(0, 3, (2, 32, 32))
        boundary_gt = rng.integers(0, 4, (2, 4, 4))
        first = self._gradients(tiny_config(), x, labels, boundary_gt)
        second = self._gradients(tiny_config(), x, labels, boundary_gt)
        assert len(first) == len(second) and all(g is not None for g in first)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_eval_forward_is_bitwise_reproducible(self, tiny_config):
        x = Tensor(np.random.default_rng(9).standard_normal((1, 3, 32, 32)).astype(np.float32))
        model = build_model(tiny_config(), seed=1).eval()
        twin = build_model(tiny_config(), seed=1).eval()
        seg, boundary = model_forward(model, x)
        for again in (model_forward(model, x), model_forward(twin, x)):
            np.testing.assert_array_equal(again[0].data, seg.data)
            np.testing.assert_array_equal(again[1].data, boundary.data)


class TestModelGradient:
    def test_end_to_end(self, tiny_config):
        """Finite differences through the whole network and both losses, in float64."""
        model = build_model(tiny_config(), seed=0, dtype=np.float64).eval()
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 3, 32, 32)), requires_grad=True)
        labels = rng.integers(0, 3, (2, 32, 32))
        boundary_gt = rng.integers(0, 4, (2, 4, 4))
        config = LossConfig(lambda_=1.0)

        def loss(x, *params):
            seg, boundary = model_forward(model, x)
            return combined_loss(seg, boundary, labels, boundary_gt, config)

        report = grad_check(loss, [x, *model.parameters()], tolerance=1e-3, max_elements=6, seed=0)
        assert report.passed, max(report.per_input)


# ============================================================================
# Checkpoints
# ============================================================================

class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_config):
        model = build_model(tiny_config(sap__kernel_mode=KernelMode.DILATED_CONV_3X3), seed=9)
        rng = np.random.default_rng(0)
        for _, state in model.named_bn_states():
            state.running_mean = rng.standard_normal(state.channels).astype(np.float32)
        save_checkpoint(model, tmp_path / "ckpt")
        loaded, run = load_checkpoint(tmp_path / "ckpt")

        assert run.model == model.config
        original, restored = model.state_arrays(), loaded.state_arrays()
        assert original.keys() == restored.keys()
        for name in original:
            np.testing.assert_array_equal(original[name], restored[name])

        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        np.testing.assert_array_equal(model_forward(model.eval(), x)[0].data, model_forward(loaded.eval(), x)[0].data)

    def test_missing_manifest(self, tmp_path, tiny_config):
        directory = save_checkpoint(build_model(tiny_config()), tmp_path / "ckpt")
        (directory / "manifest.txt").unlink()
        with pytest.raises(ConfigError, match="manifest"):
            load_checkpoint(directory)

    def test_shape_mismatch(self, tmp_path, tiny_config):
        directory = save_checkpoint(build_model(tiny_config()), tmp_path / "ckpt")
        cfg = directory / "config.cfg"
        cfg.write_text(cfg.read_text().replace("model.fusion_width = 4", "model.fusion_width = 6"))
        with pytest.raises(ShapeError):
            load_checkpoint(directory)

    def test_manifest_missing_parameter(self, tmp_path, tiny_config):
        directory = save_checkpoint(build_model(tiny_config()), tmp_path / "ckpt")
        manifest = directory / "manifest.txt"
        lines = manifest.read_text().splitlines()
        manifest.write_text("\n".join(lines[1:]) + "\n")
        with pytest.raises(ConfigError, match=lines[0].split()[0]):
            load_checkpoint(directory)

    def test_manifest_missing_running_statistic(self, tmp_path, tiny_config):
        directory = save_checkpoint(build_model(tiny_config()), tmp_path / "ckpt")
        manifest = directory / "manifest.txt"
        kept = [line for line in manifest.read_text().splitlines() if not line.startswith("stem.conv.bn.running_var")]
        manifest.write_text("\n".join(kept) + "\n")
        with pytest.raises(ConfigError, match="running_var"):
            load_checkpoint(directory)
