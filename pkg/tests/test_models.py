import numpy as np
import pytest

from fedrepopt import ops
from fedrepopt.errors import ShapeError
from fedrepopt.models import ModelSpec, build_model, ghost_micro, vgg_micro


def small_spec(family, resolution=16):
    return ModelSpec(family, (4, 8), (1, 1), classes=5, resolution=resolution)


def state_bytes(model):
    return b"".join(v.tobytes() for v in model.state_dict().values())


class TestBuildDeterminism:
    @pytest.mark.parametrize("family", ["vgg_micro", "ghost_micro"])
    @pytest.mark.parametrize("variant", ["rep_tr", "plain", "csla", "repopt"])
    def test_same_seed_bit_identical(self, family, variant):
        a = build_model(small_spec(family), variant, seed=7)
        b = build_model(small_spec(family), variant, seed=7)
        assert state_bytes(a) == state_bytes(b)

    def test_different_seed_differs(self):
        a = build_model(small_spec("vgg_micro"), "plain", seed=7)
        b = build_model(small_spec("vgg_micro"), "plain", seed=8)
        assert state_bytes(a) != state_bytes(b)


class TestVggBlocks:
    def test_csla_with_unit_scale3_zero_scale1_equals_plain(self):
        spec = small_spec("vgg_micro")
        csla = build_model(spec, "csla", seed=1)
        for _, block in csla.blocks:
            block.scale1.s.data[:] = 0.0
        plain = build_model(spec, "plain", seed=2)
        state = plain.state_dict()
        for path, block in csla.blocks:
            state[f"{path}/conv/w"] = block.conv3.w.data
        state["head/linear/w"] = csla.head.w.data
        state["head/linear/b"] = csla.head.b.data
        plain.load_state_dict(state)

        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 16, 16))
        np.testing.assert_array_equal(csla.forward(x, "eval"), plain.forward(x, "eval"))

    def test_csla_block_matches_manual_branch_sum(self):
        spec = small_spec("vgg_micro")
        model = build_model(spec, "csla", seed=4)
        path, block = model.blocks[0]
        rng = np.random.default_rng(5)
        block.scale3.s.data[:] = rng.uniform(0.5, 1.5, block.scale3.s.shape)
        block.scale1.s.data[:] = rng.uniform(0.5, 1.5, block.scale1.s.shape)
        x = rng.standard_normal((2, 3, 16, 16))

        y = block.forward(x, "eval")
        y3, _ = ops.conv2d(x, block.conv3.w.data, stride=2, pad=1)
        y1, _ = ops.conv2d(x, block.conv1.w.data, stride=2, pad=0)
        manual = np.maximum(
            block.scale3.s.data[None, :, None, None] * y3 + block.scale1.s.data[None, :, None, None] * y1,
            0.0,
        )
        np.testing.assert_allclose(y, manual, atol=1e-12)

    def test_zero_input_gives_zero_preactivation(self):
        model = build_model(small_spec("vgg_micro"), "plain", seed=0)
        x = np.zeros((2, 3, 16, 16))
        _, block = model.blocks[0]
        pre = block.conv.forward(x, "eval")
        assert np.all(pre == 0)

    def test_csla_preactivation_linear_in_branch_weights(self):
        # superposition: pre(a*W3, b*W1) == a*pre(W3, 0) + b*pre(0, W1)
        spec = small_spec("vgg_micro")
        model = build_model(spec, "csla", seed=6)
        _, block = model.blocks[0]
        rng = np.random.default_rng(7)
        block.scale3.s.data[:] = rng.uniform(0.5, 1.5, block.scale3.s.shape)
        block.scale1.s.data[:] = rng.uniform(0.5, 1.5, block.scale1.s.shape)
        x = rng.standard_normal((2, 3, 16, 16))
        w3, w1 = block.conv3.w.data, block.conv1.w.data
        c3 = block.scale3.s.data[None, :, None, None]
        c1 = block.scale1.s.data[None, :, None, None]

        def pre(wa, wb):
            ya, _ = ops.conv2d(x, wa, stride=2, pad=1)
            yb, _ = ops.conv2d(x, wb, stride=2, pad=0)
            return c3 * ya + c1 * yb

        a, b = 2.5, -0.75
        lhs = pre(a * w3, b * w1)
        rhs = a * pre(w3, np.zeros_like(w1)) + b * pre(np.zeros_like(w3), w1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestGhostBlocks:
    def test_depthwise_branch_channel_locality(self):
        model = build_model(small_spec("ghost_micro"), "csla", seed=8)
        _, block = model.blocks[0]
        rng = np.random.default_rng(9)
        half = block.half
        p = rng.standard_normal((2, half, 8, 8))
        p2 = p.copy()
        p2[:, 1] += 1.0

        def dw_branch(inp):
            y, _ = ops.conv2d(inp, block.dw.w.data, stride=1, pad=1, groups=half)
            return block.dw_const.s.data[None, :, None, None] * y + block.dw_scale.s.data[None, :, None, None] * inp

        delta = dw_branch(p2) - dw_branch(p)
        changed = np.abs(delta).sum(axis=(0, 2, 3)) > 0
        assert changed[1]
        assert np.all(delta[:, [c for c in range(half) if c != 1]] == 0)

    def test_concat_layout(self):
        model = build_model(small_spec("ghost_micro"), "plain", seed=10)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 16, 16))
        _, block = model.blocks[0]
        y = block.forward(x, "eval")
        assert y.shape[1] == 4
        p = block.relu1.forward(block.pw.forward(x, "eval"), "eval")
        np.testing.assert_array_equal(y[:, : block.half], p)


class TestParameterAccounting:
    @pytest.mark.parametrize("family", ["vgg_micro", "ghost_micro"])
    def test_rep_tr_has_more_parameters_than_plain(self, family):
        spec = small_spec(family)
        tr = build_model(spec, "rep_tr", seed=0)
        inf = build_model(spec, "plain", seed=0)
        assert tr.num_parameters() > inf.num_parameters()

    @pytest.mark.parametrize("family", ["vgg_micro", "ghost_micro"])
    def test_repopt_and_plain_are_structurally_identical(self, family):
        spec = small_spec(family)
        rep = build_model(spec, "repopt", seed=0)
        inf = build_model(spec, "plain", seed=1)
        rep_ids = [(pid, t.shape) for pid, t in rep.parameter_list()]
        inf_ids = [(pid, t.shape) for pid, t in inf.parameter_list()]
        assert rep_ids == inf_ids

    def test_parameter_ids_stable_across_builds(self):
        spec = small_spec("vgg_micro")
        ids1 = [pid for pid, _ in build_model(spec, "csla", seed=0).parameter_list()]
        ids2 = [pid for pid, _ in build_model(spec, "csla", seed=99).parameter_list()]
        assert ids1 == ids2

    def test_trainable_scales_flag_adds_scale_params(self):
        spec = small_spec("vgg_micro")
        frozen = build_model(spec, "csla", seed=0)
        searchable = build_model(spec, "csla", seed=0, trainable_scales=True)
        frozen_ids = {pid for pid, _ in frozen.parameter_list()}
        searchable_ids = {pid for pid, _ in searchable.parameter_list()}
        assert any(pid.endswith("scale3/s") for pid in searchable_ids)
        assert not any(pid.endswith("scale3/s") for pid in frozen_ids)


class TestStateDict:
    def test_round_trip(self):
        model = build_model(small_spec("ghost_micro"), "rep_tr", seed=12)
        state = model.state_dict()
        other = build_model(small_spec("ghost_micro"), "rep_tr", seed=99)
        other.load_state_dict(state)
        assert state_bytes(model) == state_bytes(other)

    def test_mismatched_spec_rejected(self):
        state = build_model(small_spec("vgg_micro"), "plain", seed=0).state_dict()
        other = build_model(ModelSpec("vgg_micro", (4, 8, 8), (1, 1, 1), 5, 16), "plain", seed=0)
        with pytest.raises(ShapeError):
            other.load_state_dict(state)

    def test_wrong_shape_rejected(self):
        model = build_model(small_spec("vgg_micro"), "plain", seed=0)
        state = model.state_dict()
        state["head/linear/b"] = np.zeros(6)
        with pytest.raises(ShapeError, match="head/linear/b"):
            model.load_state_dict(state)


class TestForwardContract:
    def test_resolution_mismatch_raises(self):
        model = build_model(vgg_micro(), "plain", seed=0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 3, 16, 16)), "eval")

    def test_default_specs_forward_shapes(self):
        for spec in (vgg_micro(), ghost_micro()):
            model = build_model(spec, "plain", seed=0)
            logits = model.forward(np.zeros((2, 3, 32, 32)), "eval")
            assert logits.shape == (2, 10)

    def test_ghost_widths_must_be_even(self):
        with pytest.raises(ShapeError):
            ModelSpec("ghost_micro", (3, 8), (1, 1), 5, 16)
