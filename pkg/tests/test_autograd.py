"""Tape recording, backward rules and the finite-difference verifier."""

import numpy as np
import pytest

from dmfnet import autograd as ag, blocks, ops
from dmfnet.errors import ConfigError, ShapeError


class ReluBlock:
    def forward(self, x, mode="train", tape=None):
        return ag.t_relu(tape, x)

    def parameters(self):
        return []

    def buffers(self):
        return []


class AddSelfBlock:
    """y = x + x, exercising gradient accumulation into one parent."""

    def forward(self, x, mode="train", tape=None):
        return ag.t_add(tape, x, x)

    def parameters(self):
        return []

    def buffers(self):
        return []


def conv_layer(rng, c_in=2, c_out=2, groups=1, stride=1, dilation=1, dtype=np.float64):
    spec = ops.ConvSpec(c_in, c_out, kernel=3, stride=stride, dilation=dilation,
                        padding=ops.same_padding(3, dilation), groups=groups)
    return blocks.Conv3dLayer("conv", spec, rng, dtype=dtype)


class TestForwardRecord:
    def test_relu_block_matches_plain(self, rng):
        x = rng.standard_normal((1, 1, 2, 2, 2))
        out, tape = ag.forward_record(ReluBlock(), x)
        np.testing.assert_array_equal(out, ops.relu(x))
        assert tape.output_var.data is out

    def test_conv_block_matches_plain(self, rng):
        layer = conv_layer(rng)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        plain = layer.forward(x)
        recorded, _ = ag.forward_record(layer, x)
        np.testing.assert_array_equal(plain, recorded)

    def test_dmf_unit_matches_composed_ops(self, rng):
        """Recorded DMF forward equals the same pipeline composed by hand."""
        cfg = blocks.DMFUnitConfig(4, 4, 4, g=2)
        unit = blocks.build_dmf_unit(cfg, rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 4, 6, 6, 6))
        recorded, _ = ag.forward_record(unit, x, mode="eval")

        def bn_eval(layer, v):
            p = layer.params
            return ops.batch_norm_apply(v, p.running_mean, p.running_var,
                                        p.gamma, p.beta, p.eps)

        h = ops.relu(bn_eval(unit.mux.bn_squeeze, x))
        h = ops.conv3d(h, unit.mux.weight.data, unit.mux.squeeze_spec)
        h = ops.relu(bn_eval(unit.mux.bn_inflate, h))
        h = ops.conv3d(h, unit.mux.weight.data.transpose(1, 0, 2, 3, 4),
                       unit.mux.inflate_spec)
        h = ops.add(h, x)
        a = ops.relu(bn_eval(unit.bn1, h))
        ys = [ops.conv3d(a, b.weight.data, b.spec) for b in unit.branches]
        w = unit.omega.data
        mix = w[0] * ys[0] + w[1] * ys[1] + w[2] * ys[2]
        z = ops.relu(bn_eval(unit.conv2.bn, mix))
        z = ops.conv3d(z, unit.conv2.conv.weight.data, unit.conv2.conv.spec)
        manual = ops.add(z, x)
        np.testing.assert_array_equal(recorded, manual)

    def test_replay_reproduces_outputs(self, rng):
        layer = conv_layer(rng)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        out, tape = ag.forward_record(layer, x)
        np.testing.assert_array_equal(tape.replay(), out)


class TestBackward:
    def test_relu_grads(self):
        x = np.array([-1.0, 2.0]).reshape(1, 1, 1, 1, 2)
        out, tape = ag.forward_record(ReluBlock(), x)
        gin, grads = ag.backward(tape, np.ones_like(out))
        np.testing.assert_array_equal(gin.ravel(), [0.0, 1.0])
        assert grads == {}

    def test_relu_subgradient_at_zero_is_zero(self):
        x = np.zeros((1, 1, 1, 1, 3))
        out, tape = ag.forward_record(ReluBlock(), x)
        gin, _ = ag.backward(tape, np.ones_like(out))
        np.testing.assert_array_equal(gin, 0.0)

    def test_sum_of_add_gives_ones(self, rng):
        x = rng.standard_normal((1, 1, 2, 2, 2))
        out, tape = ag.forward_record(AddSelfBlock(), x)
        gin, _ = ag.backward(tape, np.ones_like(out))
        np.testing.assert_array_equal(gin, 2.0)  # both uses accumulate

    def test_conv_weight_grad_matches_finite_differences(self, rng):
        layer = conv_layer(rng, c_in=2, c_out=2, groups=2)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        rep = ag.finite_diff_check(layer, x, tolerance=1e-6, step=1e-5,
                                   max_per_tensor=54, rng=0)
        assert rep.passed, str(rep)

    def test_zero_output_grad_gives_zero_grads(self, rng):
        layer = conv_layer(rng)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        out, tape = ag.forward_record(layer, x)
        gin, grads = ag.backward(tape, np.zeros_like(out))
        np.testing.assert_array_equal(gin, 0.0)
        np.testing.assert_array_equal(grads["conv.weight"], 0.0)

    def test_linearity_in_output_grad(self, rng):
        layer = conv_layer(rng)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        g1 = rng.standard_normal((1, 2, 4, 4, 4))
        g2 = rng.standard_normal((1, 2, 4, 4, 4))

        def run(g):
            out, tape = ag.forward_record(layer, x)
            return ag.backward(tape, g)

        gin_a, gr_a = run(g1)
        gin_b, gr_b = run(g2)
        gin_c, gr_c = run(g1 + g2)
        np.testing.assert_allclose(gin_c, gin_a + gin_b, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gr_c["conv.weight"],
                                   gr_a["conv.weight"] + gr_b["conv.weight"],
                                   rtol=1e-12, atol=1e-12)

    def test_tape_is_single_use(self, rng):
        layer = conv_layer(rng)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        out, tape = ag.forward_record(layer, x)
        ag.backward(tape, np.ones_like(out))
        with pytest.raises(ConfigError, match="consumed"):
            ag.backward(tape, np.ones_like(out))

    def test_output_grad_shape_checked(self, rng):
        layer = conv_layer(rng)
        out, tape = ag.forward_record(layer, rng.standard_normal((1, 2, 4, 4, 4)))
        with pytest.raises(ShapeError):
            ag.backward(tape, np.ones((1, 2, 3, 3, 3)))

    def test_grouped_conv_grad_equals_per_group(self, rng):
        """Gradients of a grouped conv equal per-group gradients, concatenated."""
        g = 2
        spec = ops.ConvSpec(4, 4, kernel=3, padding=1, groups=g)
        layer = blocks.Conv3dLayer("c", spec, rng, dtype=np.float64)
        x = rng.standard_normal((1, 4, 4, 4, 4))
        gout = rng.standard_normal((1, 4, 4, 4, 4))
        out, tape = ag.forward_record(layer, x)
        gin, grads = ag.backward(tape, gout)

        sub = ops.ConvSpec(2, 2, kernel=3, padding=1)
        for i in range(g):
            part = blocks.Conv3dLayer("p", sub, rng, dtype=np.float64)
            part.weight.data[...] = layer.weight.data[2 * i: 2 * i + 2]
            o, t = ag.forward_record(part, x[:, 2 * i: 2 * i + 2])
            gi, gr = ag.backward(t, gout[:, 2 * i: 2 * i + 2])
            np.testing.assert_array_equal(gin[:, 2 * i: 2 * i + 2], gi)
            np.testing.assert_array_equal(grads["c.weight"][2 * i: 2 * i + 2],
                                          gr["p.weight"])


class TestTracedOps:
    def test_upsample_grad_is_transpose(self, rng):
        """<U x, y> == <x, U^T y> for random x, y."""
        x = rng.standard_normal((1, 2, 3, 4, 2))
        y = rng.standard_normal((1, 2, 6, 8, 4))
        ux = ops.trilinear_upsample(x, 2)
        uty = ops.trilinear_upsample_grad(y, x.shape, 2)
        np.testing.assert_allclose((ux * y).sum(), (x * uty).sum(), rtol=1e-12)

    def test_branch_weighted_sum_grads(self, rng):
        omega = ag.Parameter("omega", np.array([1.0, 2.0, 3.0]))
        xs = [rng.standard_normal((1, 1, 2, 2, 2)) for _ in range(3)]

        class Mix:
            def forward(self, x, mode="train", tape=None):
                b0 = ag.t_add(tape, x, x)
                return ag.t_branch_weighted_sum(tape, [x, b0, x], omega)

            def parameters(self):
                return [omega]

            def buffers(self):
                return []

        x = xs[0]
        out, tape = ag.forward_record(Mix(), x)
        np.testing.assert_allclose(out, 1.0 * x + 2.0 * (2 * x) + 3.0 * x)
        g = rng.standard_normal(out.shape)
        gin, grads = ag.backward(tape, g)
        np.testing.assert_allclose(grads["omega"],
                                   [(x * g).sum(), (2 * x * g).sum(), (x * g).sum()])
        np.testing.assert_allclose(gin, (1.0 + 2.0 * 2 + 3.0) * g)

    def test_fixed_omega_gets_no_grad_entry(self, rng):
        omega = ag.Parameter("omega", np.ones(2), trainable=False)

        class Mix:
            def forward(self, x, mode="train", tape=None):
                return ag.t_branch_weighted_sum(tape, [x, x], omega)

            def parameters(self):
                return [omega]

            def buffers(self):
                return []

        x = rng.standard_normal((1, 1, 2, 2, 2))
        out, tape = ag.forward_record(Mix(), x)
        _, grads = ag.backward(tape, np.ones_like(out))
        assert "omega" not in grads


class TestFiniteDiffCheck:
    def test_requires_float64(self, rng):
        layer = conv_layer(rng, dtype=np.float32)
        with pytest.raises(ConfigError, match="float64"):
            ag.finite_diff_check(layer, rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32))
        with pytest.raises(ConfigError, match="float64"):
            ag.finite_diff_check(layer, rng.standard_normal((1, 2, 4, 4, 4)))

    def test_pure_linear_block_is_exact(self, rng):
        layer = conv_layer(rng, c_in=2, c_out=3)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        rep = ag.finite_diff_check(layer, x, tolerance=1e-8, step=1e-4,
                                   max_per_tensor=40, rng=0)
        assert rep.passed, str(rep)

    def test_bn_train_mode(self, rng):
        bn = blocks.BatchNorm3d("bn", 3, dtype=np.float64)
        bn.gamma.data[:] = rng.standard_normal(3)
        bn.beta.data[:] = rng.standard_normal(3)
        x = rng.standard_normal((2, 3, 4, 4, 4))
        rep = ag.finite_diff_check(bn, x, tolerance=1e-5, step=1e-5,
                                   max_per_tensor=60, rng=0)
        assert rep.passed, str(rep)

    def test_bn_buffers_restored(self, rng):
        bn = blocks.BatchNorm3d("bn", 2, dtype=np.float64)
        before = bn.params.running_mean.copy()
        ag.finite_diff_check(bn, rng.standard_normal((1, 2, 3, 3, 3)),
                             max_per_tensor=4, rng=0)
        np.testing.assert_array_equal(bn.params.running_mean, before)

    def test_nonfinite_loss_reported(self, rng):
        class Bad:
            def forward(self, x, mode="train", tape=None):
                y = ag.t_relu(tape, x)
                y.data[0, 0, 0, 0, 0] = np.nan
                return y

            def parameters(self):
                return []

            def buffers(self):
                return []

        rep = ag.finite_diff_check(Bad(), rng.standard_normal((1, 1, 2, 2, 2)))
        assert not rep.passed
        assert "finite" in rep.failure
