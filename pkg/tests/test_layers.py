"""
Tests for the module system and the conv/BN building blocks.
"""

import numpy as np
import pytest

from src.layers import BasicBlock, ConvBN, DepthwiseSeparableBN, Module, fold_model
from src.ops import ConvSpec
from src.tensor import Tensor


def randomize_bn(module: Module, rng, min_var: float = 1e-3):
    for _, m in module.named_modules():
        bn = getattr(m, "bn", None)
        if bn is None:
            continue
        c = bn.gamma.shape[0]
        bn.gamma.data = rng.uniform(0.5, 2.0, c).astype(bn.gamma.dtype)
        bn.beta.data = rng.standard_normal(c).astype(bn.beta.dtype)
        bn.state.running_mean = rng.standard_normal(c).astype(bn.state.running_mean.dtype)
        bn.state.running_var = rng.uniform(min_var, 2.0, c).astype(bn.state.running_var.dtype)


class TestModule:
    def test_named_parameters(self, rng):
        layer = ConvBN(ConvSpec.square(2, 3, 3, padding=1), rng)
        names = [name for name, _ in layer.named_parameters()]
        assert names == ["conv.weight", "bn.gamma", "bn.beta"]

    def test_bn_running_stats_are_not_parameters(self, rng):
        layer = ConvBN(ConvSpec.square(2, 3, 3, padding=1), rng)
        assert sum(p.size for p in layer.parameters()) == 3 * 2 * 9 + 2 * 3
        assert [name for name, _ in layer.named_bn_states()] == ["bn"]

    def test_train_eval_reaches_children(self, rng):
        block = BasicBlock(2, 4, 2, rng)
        block.eval()
        assert all(not m.training for _, m in block.named_modules())
        block.train()
        assert all(m.training for _, m in block.named_modules())

    def test_zero_grad(self, rng):
        layer = ConvBN(ConvSpec.square(1, 1, 1), rng)
        for p in layer.parameters():
            p.grad = np.ones_like(p.data)
        layer.zero_grad()
        assert all(p.grad is None for p in layer.parameters())


class TestBlocks:
    def test_basic_block_projection_only_when_needed(self, rng):
        assert BasicBlock(4, 4, 1, rng).shortcut is None
        assert BasicBlock(4, 8, 1, rng).shortcut is not None
        assert BasicBlock(4, 4, 2, rng).shortcut is not None

    def test_basic_block_output_shape(self, rng):
        out = BasicBlock(3, 6, 2, rng)(Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32)))
        assert out.shape == (2, 6, 4, 4)
        assert (out.data >= 0).all()

    def test_depthwise_separable_shapes(self, rng):
        layer = DepthwiseSeparableBN(6, 4, rng)
        assert layer.depthwise.weight.shape == (6, 1, 3, 3)
        assert layer.pointwise.conv.weight.shape == (4, 6, 1, 1)
        out = layer(Tensor(rng.standard_normal((1, 6, 5, 5)).astype(np.float32)))
        assert out.shape == (1, 4, 5, 5)


class TestFolding:
    @pytest.mark.parametrize("factory", [
        lambda rng: ConvBN(ConvSpec.square(3, 4, 3, padding=1), rng, np.float64),
        lambda rng: ConvBN(ConvSpec.square(3, 4, 3, stride=2, padding=1), rng, np.float64, act=False),
        lambda rng: DepthwiseSeparableBN(3, 5, rng, np.float64),
        lambda rng: BasicBlock(3, 6, 2, rng, np.float64),
    ])
    def test_folded_matches_eval(self, rng, factory):
        module = factory(rng)
        randomize_bn(module, rng)
        module.eval()
        inputs = [Tensor(rng.standard_normal((2, 3, 8, 8))) for _ in range(10)]
        expected = [module(x).data for x in inputs]
        folded = fold_model(module)
        assert folded >= 1
        assert not list(module.named_bn_states())
        for x, ref in zip(inputs, expected):
            np.testing.assert_allclose(module(x).data, ref, atol=1e-5)

    def test_fold_float32_site(self, rng):
        layer = ConvBN(ConvSpec.square(3, 4, 3, padding=1), rng)
        randomize_bn(layer, rng, min_var=0.5)
        layer.eval()
        x = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
        ref = layer(x).data
        layer.fold()
        assert layer.bn is None and layer.conv.spec.has_bias
        np.testing.assert_allclose(layer(x).data, ref, rtol=1e-5, atol=1e-4)

    def test_fold_is_idempotent(self, rng):
        block = BasicBlock(2, 2, 1, rng)
        assert fold_model(block) == 2
        assert fold_model(block) == 0
