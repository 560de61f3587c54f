import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import he_init, randn
from convdrop.blocks import (KINDS, BlockConfig, BottleneckBlock, ComponentCensus, block_forward,
                             build_block, census, conv_weight_count, count_params, eq8_width)
from convdrop.diagnostics import grad_check
from convdrop.dropout import DropSpec, freeze_masks
from convdrop.errors import ConfigError, ShapeError
from convdrop.layers import BatchNorm2d, Conv2d
from oracles import enumerate_gated_units, explicit_paths


def quiet_config(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return BlockConfig(*args, **kw)


class TestBlockConfig:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            BlockConfig("dense", C=4)

    @pytest.mark.parametrize("P", [3, 6, 0])
    def test_paths_power_of_two(self, P):
        with pytest.raises(ConfigError):
            BlockConfig("droppath_bottleneck", C=64, P=P, d=2)

    def test_zero_width(self):
        with pytest.raises(ConfigError):
            BlockConfig("droppath_bottleneck", C=64, P=4, d=0)

    def test_width_derived(self):
        assert BlockConfig("droppath_bottleneck", C=256, P=32).d == 4

    def test_wide_path_warns(self):
        with pytest.warns(UserWarning):
            BlockConfig("droppath_bottleneck", C=8, P=1, d=4)

    def test_path_needs_bottleneck(self):
        with pytest.raises(ConfigError):
            BlockConfig("residual_droplayer", C=4, drops=(DropSpec("path", 0.1),))

    @pytest.mark.parametrize("kind", ["traditional_preact", "proposed_preact"])
    def test_layer_needs_shortcut(self, kind):
        with pytest.raises(ConfigError):
            BlockConfig(kind, C=4, drops=(DropSpec("layer", 0.1),))

    def test_layer_needs_shape_preserving(self):
        with pytest.raises(ConfigError):
            BlockConfig("residual_droplayer", C=8, c_in=4, drops=(DropSpec("layer", 0.1),))

    def test_one_drop_per_plain_unit(self):
        with pytest.raises(ConfigError):
            BlockConfig("proposed_preact", C=4,
                        drops=(DropSpec("neuron", 0.1), DropSpec("channel", 0.1)))

    def test_duplicate_level(self):
        with pytest.raises(ConfigError):
            BlockConfig("residual_droplayer", C=4,
                        drops=(DropSpec("layer", 0.1), DropSpec("layer", 0.2)))


class TestPlainBlocks:
    def test_order(self):
        trad = build_block(BlockConfig("traditional_preact", C=2, drops=(DropSpec("channel", 0.1),)))
        prop = build_block(BlockConfig("proposed_preact", C=2, drops=(DropSpec("channel", 0.1),)))
        names = lambda b: [type(m).__name__ for m in b.seq]  # noqa: E731
        assert names(trad) == ["BatchNorm2d", "ReLU", "Conv2d", "Drop"]
        assert names(prop) == ["BatchNorm2d", "ReLU", "Drop", "Conv2d"]

    def test_p0_orders_agree(self, gen):
        x = gen.normal(size=(4, 3, 5, 5))
        blocks = [he_init(build_block(BlockConfig(k, C=3, drops=(DropSpec("channel", 0.0),))))
                  for k in ("traditional_preact", "proposed_preact")]
        for key in ("bn", "conv"):
            for name, v in getattr(blocks[0], key).params.items():
                getattr(blocks[1], key).params[name] = v.copy()
        outs = [block_forward(b, x, training=True) for b in blocks]
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_eval_deterministic(self, gen):
        b = he_init(build_block(BlockConfig("traditional_preact", C=3,
                                            drops=(DropSpec("channel", 0.5),))))
        x = gen.normal(size=(2, 3, 4, 4))
        a = block_forward(b, x, training=False, draw_id=(0, 0))
        c = block_forward(b, x, training=False, draw_id=(5, 7))
        assert np.array_equal(a, c) and b.drop.last_mask is None

    def test_proposed_is_conv_of_masked(self, gen):
        b = he_init(build_block(BlockConfig("proposed_preact", C=3,
                                            drops=(DropSpec("channel", 0.5),))))
        x = gen.normal(size=(2, 3, 4, 4))
        out = block_forward(b, x, training=True, draw_id=(1, 2))
        gates = b.drop.last_mask.gates
        h = np.maximum(b.bn.forward(x), 0) * (2.0 * gates)[:, :, None, None]
        np.testing.assert_allclose(out, b.conv.forward(h), atol=1e-12)

    def test_proposed_p0_plain_pipeline(self, gen):
        b = he_init(build_block(BlockConfig("proposed_preact", C=3)))
        x = gen.normal(size=(2, 3, 4, 4))
        out = block_forward(b, x)
        np.testing.assert_array_equal(out, b.conv.forward(np.maximum(b.bn.forward(x), 0)))

    def test_shape_mismatch(self):
        b = build_block(BlockConfig("proposed_preact", C=3))
        with pytest.raises(ShapeError):
            b.forward(np.zeros((1, 4, 3, 3)))


class TestPlacementInvariant:
    """The tensor entering a BN layer is never touched by a mask in proposed blocks."""

    @staticmethod
    def bn_inputs(kind, p, x):
        # Two-block pipeline: block under test feeding a second block's BN.
        first = he_init(build_block(BlockConfig(kind, C=4, drops=(DropSpec("channel", p),))))
        second = he_init(build_block(BlockConfig(kind, C=4)), seed=1)
        seen = {}
        for name, bn in (("own", first.bn), ("next", second.bn)):
            orig = bn.forward
            bn.forward = lambda t, orig=orig, name=name: (seen.__setitem__(name, t.copy()), orig(t))[1]
        block_forward(second, block_forward(first, x, draw_id=(0, 3)), draw_id=(0, 3))
        return seen

    @pytest.mark.parametrize("p", [0.1, 0.5])
    def test_proposed_own_bn_input_bitwise(self, gen, p):
        x = gen.normal(size=(4, 4, 4, 4))
        a, b = self.bn_inputs("proposed_preact", 0.0, x), self.bn_inputs("proposed_preact", p, x)
        assert a["own"].tobytes() == b["own"].tobytes()

    @pytest.mark.parametrize("p", [0.1, 0.5])
    def test_traditional_next_bn_input_perturbed(self, gen, p):
        x = gen.normal(size=(4, 4, 4, 4))
        a = self.bn_inputs("traditional_preact", 0.0, x)
        b = self.bn_inputs("traditional_preact", p, x)
        assert not np.array_equal(a["next"], b["next"])


class TestBottleneck:
    def test_all_gates_zero_gives_identity(self, gen):
        block = he_init(BottleneckBlock(quiet_config("droppath_bottleneck", C=8, P=4, d=1,
                                                     drops=(DropSpec("path", 0.5),))))
        x = gen.normal(size=(2, 8, 3, 3))
        block.train()
        block.forward(x)
        block.path_gate._gates = np.zeros((2, 4))
        freeze_masks(block)
        np.testing.assert_array_equal(block.forward(x), x)

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 10**6))
    def test_grouped_equals_explicit_paths(self, P, d, mult, seed):
        C = P * d * mult
        block = he_init(BottleneckBlock(quiet_config("droppath_bottleneck", C=C, P=P, d=d,
                                                     drops=(DropSpec("path", 0.4),))), seed=seed)
        x = np.random.default_rng(seed).normal(size=(3, C, 4, 4))
        out = block_forward(block, x, draw_id=(seed % 97, 1))
        ref = explicit_paths(block, x, block.path_gate.last_mask.gates, 1 / 0.6)
        assert np.abs(out - ref).max() <= 1e-10

    def test_default_width_rule(self):
        cfg = BlockConfig("droppath_bottleneck", C=256, P=32)
        assert cfg.d == 4 and cfg.P * cfg.d == 128

    def test_path_count_must_divide(self):
        from convdrop.dropout import PathGate
        with pytest.raises(ConfigError):
            PathGate(DropSpec("path", 0.1), 3).forward(np.zeros((1, 4, 1, 1)))

    def test_sites_get_distinct_ids(self):
        block = build_block(quiet_config("droppath_bottleneck", C=8, P=2, d=2,
                                         drops=(DropSpec("channel", 0.2), DropSpec("path", 0.2),
                                                DropSpec("layer", 0.2))))
        ids = [m.layer_id for m in block.modules() if hasattr(m, "layer_id")]
        assert len(ids) == len(set(ids)) == 5


class TestResidual:
    def make(self, p=0.3, C=4):
        return he_init(build_block(BlockConfig("residual_droplayer", C=C,
                                               drops=(DropSpec("layer", p),))))

    def test_gate_zero_bitwise_identity(self, gen):
        block = self.make()
        x = gen.normal(size=(2, 4, 3, 3))
        block.train()
        block.gate, block.frozen = 0, True
        assert block.forward(x).tobytes() == x.tobytes()

    def test_gate_one_scaled(self, gen):
        block = self.make(p=0.25)
        x = gen.normal(size=(2, 4, 3, 3))
        block.train()
        block.gate, block.frozen = 1, True
        fx = block.transform(x)
        np.testing.assert_allclose(block.forward(x), fx / 0.75 + x, atol=1e-12)

    def test_eval(self, gen):
        block = self.make()
        x = gen.normal(size=(2, 4, 3, 3))
        block.eval()
        np.testing.assert_allclose(block.forward(x), block.transform(x) + x, atol=1e-12)

    def test_zero_transform(self, gen):
        block = self.make()
        for m in block.modules():
            if isinstance(m, Conv2d):
                m.params["weight"][...] = 0.0
        x = gen.normal(size=(2, 4, 3, 3))
        for draw in range(5):
            assert np.array_equal(block_forward(block, x, draw_id=(0, draw)), x)

    def test_gate_expectation_exact(self, gen):
        block = self.make(p=0.3)
        x = gen.normal(size=(2, 4, 3, 3))
        block.train()
        outs = {}
        for g in (0, 1):
            block.gate, block.frozen = g, True
            outs[g] = block.forward(x)
        # Same batch statistics on both draws, so the two-point mean is f(x) + x.
        np.testing.assert_allclose(0.7 * outs[1] + 0.3 * outs[0], block.transform(x) + x,
                                   atol=1e-12)

    def test_projection_on_downsample(self, gen):
        block = he_init(build_block(BlockConfig("residual_droplayer", C=8, c_in=4, stride=2)))
        assert block.forward(gen.normal(size=(1, 4, 8, 8))).shape == (1, 8, 4, 4)


class TestGradients:
    @pytest.mark.parametrize("kind,levels", [
        ("traditional_preact", ["channel"]),
        ("traditional_preact", ["neuron"]),
        ("proposed_preact", ["channel"]),
        ("proposed_preact", ["neuron"]),
        ("droppath_bottleneck", ["channel", "path", "layer"]),
        ("residual_droplayer", ["channel", "layer"]),
    ])
    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-4)])
    def test_frozen_mask_gradients(self, kind, levels, dtype, tol):
        cfg = quiet_config(kind, C=8, P=2, d=2, drops=tuple(DropSpec(lv, 0.25) for lv in levels))
        rep = grad_check(he_init(build_block(cfg)), randn(4, 8, 4, 4), tol=tol, dtype=dtype)
        assert rep.passed, str(rep)

    def test_downsampling_block(self):
        cfg = BlockConfig("residual_droplayer", C=8, c_in=4, stride=2,
                          drops=(DropSpec("channel", 0.2),))
        assert grad_check(he_init(build_block(cfg)), randn(2, 4, 6, 6)).passed


class TestParamCount:
    def test_full_width_bottleneck(self):
        cfg = BlockConfig("droppath_bottleneck", C=256, P=32, d=4)
        assert count_params(cfg) == 70_144 == 32 * 4 * (512 + 36)
        assert conv_weight_count(build_block(cfg)) == 70_144

    def test_original_bottleneck(self):
        cfg = quiet_config("droppath_bottleneck", C=256, P=1, d=64)
        assert count_params(cfg) == conv_weight_count(build_block(cfg)) == 69_632

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(KINDS), st.integers(1, 12), st.sampled_from([1, 2, 4]),
           st.integers(1, 3), st.sampled_from([1, 2]), st.integers(1, 10))
    def test_formula_matches_enumeration(self, kind, mult, P, d, stride, c_in):
        C = P * d * mult
        cfg = quiet_config(kind, C=C, P=P, d=d, c_in=c_in, stride=stride)
        block = build_block(cfg)
        assert count_params(cfg) == conv_weight_count(block)

    @pytest.mark.parametrize("C", [64, 128, 256, 512])
    def test_eq8_relation(self, C):
        counts = []
        for P in (1, 2, 4, 8, 16, 32):
            d = eq8_width(C, P)
            assert P * d == C // 2
            counts.append(count_params(quiet_config("droppath_bottleneck", C=C, P=P, d=d)))
        # Only the 9 P d^2 term depends on P: differences match it exactly.
        base = (C // 2) * 2 * C
        for P, n in zip((1, 2, 4, 8, 16, 32), counts):
            assert n - base == 9 * P * eq8_width(C, P) ** 2


class TestCensus:
    def test_wide_stage(self):
        assert census(6, 32, 4, 8, 8) == ComponentCensus(49152, 768, 192, 6)

    def test_degenerate(self):
        assert census(1, 1, 1, 1, 1).as_dict() == dict(neuron=1, channel=1, path=1, layer=1)

    def test_nonpositive(self):
        with pytest.raises(ConfigError):
            census(0, 1, 1, 1, 1)

    @settings(max_examples=30)
    @given(*(st.integers(1, 6) for _ in range(5)), st.sampled_from(range(5)))
    def test_monotone(self, L, P, d, W, H, which):
        args = [L, P, d, W, H]
        bigger = list(args)
        bigger[which] += 1
        a, b = census(*args).as_dict(), census(*bigger).as_dict()
        assert all(b[k] >= a[k] for k in a)

    def test_strictly_decreasing(self):
        c = census(3, 4, 2, 2, 2)
        assert c.neuron > c.channel > c.path > c.layer

    @pytest.mark.parametrize("L,P,d,W,H", [(2, 4, 2, 3, 3), (1, 1, 1, 2, 1), (3, 2, 3, 1, 4)])
    def test_brute_force(self, L, P, d, W, H):
        assert enumerate_gated_units(L, P, d, W, H) == census(L, P, d, W, H).as_dict()


def test_bn_params_of_block():
    cfg = BlockConfig("residual_droplayer", C=4)
    block = build_block(cfg)
    n_bn = sum(m.params["gamma"].size * 2 for m in block.modules() if isinstance(m, BatchNorm2d))
    assert block.num_trainable() == count_params(cfg) + n_bn
