"""Network building blocks: conv, norms, residual, SE and attention gates.

Forward semantics are checked against closed-form or dual-route oracles;
every block is finite-difference checked in f64 through ``gradcheck``.
Spectral-norm checks freeze the power iteration (``n_power_iterations=0``)
because backward treats the sigma estimate as a constant.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcsagan.engine import ops
from mcsagan.engine.gradcheck import gradcheck
from mcsagan.engine.module import Buffer, Module, ModuleList, Parameter
from mcsagan.engine.tensor import Tensor
from mcsagan.layers import (AttentionGate, ChannelNorm, Conv3d, ResidualBlock,
                            SEGate, conv_init)


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype="f64")


class TestConvInit:
    def test_shape_and_dtype(self, rng):
        w = conv_init(rng, 8, 4, 3)
        assert w.shape == (8, 4, 3, 3, 3)
        assert w.dtype == np.float32

    def test_kaiming_scale(self):
        # std = sqrt(2 / fan_in); large sample keeps the estimate tight
        w = conv_init(np.random.default_rng(0), 64, 32, 3)
        expected = np.sqrt(2.0 / (32 * 27))
        assert abs(w.std() / expected - 1.0) < 0.05

    def test_deterministic_from_seed(self):
        a = conv_init(np.random.default_rng(5), 4, 2, 3)
        b = conv_init(np.random.default_rng(5), 4, 2, 3)
        np.testing.assert_array_equal(a, b)


class TestConv3d:
    def test_same_padding_default(self, rng):
        conv = Conv3d(rng, 2, 3, k=3)
        assert conv.padding == 1
        y = conv(Tensor(np.zeros((1, 2, 5, 6, 7), dtype=np.float32)))
        assert y.shape == (1, 3, 5, 6, 7)

    def test_strided_shape(self, rng):
        conv = Conv3d(rng, 1, 4, k=3, stride=2)
        y = conv(Tensor(np.zeros((2, 1, 8, 8, 8), dtype=np.float32)))
        assert y.shape == (2, 4, 4, 4, 4)

    def test_no_bias(self, rng):
        conv = Conv3d(rng, 2, 2, k=1, bias=False)
        assert conv.bias is None
        assert len(conv.parameters()) == 1

    def test_gradcheck_weight_bias_input(self, rng):
        conv = Conv3d(rng, 2, 3, k=3, stride=2).to_dtype(np.float64)
        x = t64(rng, 2, 2, 5, 5, 5)
        gradcheck(lambda *_: conv(x), [x, conv.weight, conv.bias])


class TestSpectralNorm:
    def test_buffers_registered(self, rng):
        conv = Conv3d(rng, 2, 4, k=3, spectral=True)
        names = dict(conv.named_buffers())
        assert set(names) == {"u_state", "sigma"}
        assert abs(np.linalg.norm(names["u_state"].data) - 1.0) < 1e-6

    def test_effective_weight_unit_sigma(self, rng):
        conv = Conv3d(rng, 3, 6, k=3, spectral=True, n_power_iterations=50)
        w_eff = conv.effective_weight().data.reshape(6, -1)
        assert abs(np.linalg.svd(w_eff, compute_uv=False)[0] - 1.0) < 1e-4

    def test_sigma_matches_svd(self, rng):
        conv = Conv3d(rng, 3, 6, k=3, spectral=True, n_power_iterations=50)
        conv.effective_weight()
        true_sigma = np.linalg.svd(conv.weight.data.reshape(6, -1),
                                   compute_uv=False)[0]
        assert abs(conv.sigma.data[0] - true_sigma) < 1e-4 * true_sigma

    def test_zero_iterations_freezes_sigma(self, rng):
        conv = Conv3d(rng, 2, 4, k=3, spectral=True, n_power_iterations=5)
        conv.effective_weight()  # warm up the estimate
        sigma = conv.sigma.data.copy()
        u = conv.u_state.data.copy()
        conv.n_power_iterations = 0
        conv.weight.data *= 1.7  # stale sigma must survive a weight change
        conv.effective_weight()
        np.testing.assert_array_equal(conv.sigma.data, sigma)
        np.testing.assert_array_equal(conv.u_state.data, u)

    def test_zero_weight_bypass(self, rng):
        conv = Conv3d(rng, 2, 4, k=3, spectral=True, bias=False)
        conv.weight.data[...] = 0.0
        y = conv(Tensor(np.ones((1, 2, 4, 4, 4), dtype=np.float32)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_gradcheck_frozen_sigma(self, rng):
        conv = Conv3d(rng, 2, 3, k=3, spectral=True,
                      n_power_iterations=5).to_dtype(np.float64)
        x = t64(rng, 1, 2, 4, 4, 4)
        conv(x)  # settle sigma before freezing the estimator
        conv.n_power_iterations = 0
        gradcheck(lambda *_: conv(x), [x, conv.weight, conv.bias])


class TestChannelNorm:
    def test_instance_standardizes_per_channel(self, rng):
        norm = ChannelNorm(3, mode="instance")
        x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 5 + 2, dtype="f32")
        y = norm(x).data
        np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=(2, 3, 4)), 1.0, atol=1e-3)

    def test_group_standardizes_per_group(self, rng):
        norm = ChannelNorm(4, mode="group", groups=2)
        x = Tensor(rng.standard_normal((2, 4, 3, 3, 3)), dtype="f32")
        y = norm(x).data.reshape(2, 2, 2, 3, 3, 3)
        np.testing.assert_allclose(y.mean(axis=(2, 3, 4, 5)), 0.0, atol=1e-5)

    def test_degenerate_group_equals_instance(self, rng):
        # fewer channels than groups collapses to one channel per group
        x = Tensor(rng.standard_normal((1, 4, 3, 3, 3)), dtype="f32")
        got = ChannelNorm(4, mode="group", groups=8)(x).data
        want = ChannelNorm(4, mode="instance")(x).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_affine_applied(self, rng):
        norm = ChannelNorm(2, mode="instance")
        norm.weight.data[...] = [2.0, 3.0]
        norm.bias.data[...] = [-1.0, 4.0]
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), dtype="f32")
        y = norm(x).data
        np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), [[-1.0, 4.0]],
                                   atol=1e-4)
        np.testing.assert_allclose(y.std(axis=(2, 3, 4)), [[2.0, 3.0]],
                                   rtol=1e-2)

    def test_gradcheck_both_modes(self, rng):
        for mode in ("instance", "group"):
            norm = ChannelNorm(4, mode=mode, groups=2).to_dtype(np.float64)
            x = t64(rng, 2, 4, 3, 3, 3)
            gradcheck(lambda *_: norm(x), [x, norm.weight, norm.bias])

    def test_fused_and_reference_routes_agree(self, rng):
        # normalize dispatches to a fused kernel when it can; the composed
        # reference route must stay interchangeable in value and gradient
        for mode, dt, tol in (("instance", "f32", 1e-4), ("group", "f32", 1e-4),
                              ("instance", "f64", 1e-12), ("group", "f64", 1e-12)):
            x_np = rng.standard_normal((2, 6, 4, 3, 5))
            w_np = rng.standard_normal(6)
            b_np = rng.standard_normal(6)
            results = []
            for route in (ops.normalize, ops.normalize_ref):
                x = Tensor(x_np, requires_grad=True, dtype=dt)
                w = Tensor(w_np, requires_grad=True, dtype=dt)
                b = Tensor(b_np, requires_grad=True, dtype=dt)
                y = route(x, mode=mode, groups=3, weight=w, bias=b)
                (y * y).sum().backward()  # non-uniform seed exercises the vjp
                results.append((y.data, x.grad.data, w.grad.data, b.grad.data))
            for got, want in zip(results[0], results[1]):
                np.testing.assert_allclose(got, want, atol=tol)

    def test_fused_backward_is_first_order_only(self, rng):
        from mcsagan.engine import _kernels
        if not _kernels.HAVE_NUMBA:
            pytest.skip("fused kernel unavailable")
        x = Tensor(rng.standard_normal((1, 4, 3, 3, 3)), requires_grad=True,
                   dtype="f64")
        w = Tensor(np.ones(4), requires_grad=True, dtype="f64")
        b = Tensor(np.zeros(4), requires_grad=True, dtype="f64")
        y = ops.normalize(x, mode="instance", weight=w, bias=b)
        with pytest.raises(RuntimeError, match="first-order"):
            y.sum().backward(create_graph=True)
        # the reference route accepts the same request
        y_ref = ops.normalize_ref(x, mode="instance", weight=w, bias=b)
        y_ref.sum().backward(create_graph=True)


class TestResidualBlock:
    def test_identity_at_zero_weights(self, rng):
        block = ResidualBlock(rng, 4, 4)
        block.conv1.weight.data[...] = 0.0
        block.conv2.weight.data[...] = 0.0
        x = Tensor(rng.standard_normal((2, 4, 5, 5, 5)), dtype="f32")
        np.testing.assert_array_equal(block(x).data, x.data)

    @given(channels=st.sampled_from([1, 2, 4, 8]),
           side=st.integers(min_value=2, max_value=5),
           seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_identity_property(self, channels, side, seed):
        # residual branch vanishes exactly: norm(0)=0, conv(0)=0, skip is x
        r = np.random.default_rng(seed)
        block = ResidualBlock(r, channels, channels)
        block.conv1.weight.data[...] = 0.0
        block.conv2.weight.data[...] = 0.0
        x = Tensor(r.standard_normal((1, channels, side, side, side)),
                   dtype="f32")
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_projection_skip(self, rng):
        block = ResidualBlock(rng, 2, 6)
        assert block.proj is not None
        assert block.proj.k == 1 and block.proj.bias is None
        y = block(Tensor(np.zeros((1, 2, 4, 4, 4), dtype=np.float32)))
        assert y.shape == (1, 6, 4, 4, 4)
        assert ResidualBlock(rng, 6, 6).proj is None

    def test_gradcheck(self, rng):
        block = ResidualBlock(rng, 2, 3).to_dtype(np.float64)
        x = t64(rng, 1, 2, 4, 4, 4)
        params = [p for p in block.parameters()]
        gradcheck(lambda *_: block(x), [x] + params)


class TestSEGate:
    def test_gate_shape_and_range(self, rng):
        se = SEGate(rng, 16, r=8)
        x = Tensor(rng.standard_normal((2, 16, 4, 4, 4)), dtype="f32")
        g = se.gate(x).data
        assert g.shape == (2, 16, 1, 1, 1)
        assert np.all(g > 0.0) and np.all(g < 1.0)

    def test_reduction_floor(self, rng):
        assert SEGate(rng, 64, r=8).reduced == 8
        assert SEGate(rng, 128, r=8).reduced == 16
        assert SEGate(rng, 16, r=8).reduced == 8  # floor kicks in

    def test_forward_is_broadcast_product(self, rng):
        se = SEGate(rng, 8)
        x = Tensor(rng.standard_normal((1, 8, 3, 3, 3)), dtype="f32")
        np.testing.assert_allclose(se(x).data, x.data * se.gate(x).data,
                                   rtol=1e-6)

    def test_gate_depends_only_on_channel_means(self, rng):
        se = SEGate(rng, 8)
        x = rng.standard_normal((1, 8, 4, 4, 4)).astype(np.float32)
        flat = np.broadcast_to(x.mean(axis=(2, 3, 4), keepdims=True), x.shape)
        g1 = se.gate(Tensor(x)).data
        g2 = se.gate(Tensor(np.ascontiguousarray(flat))).data
        np.testing.assert_allclose(g1, g2, rtol=1e-5)

    def test_gradcheck(self, rng):
        se = SEGate(rng, 4, r=1).to_dtype(np.float64)
        x = t64(rng, 1, 4, 3, 3, 3)
        gradcheck(lambda *_: se(x), [x] + se.parameters())


class TestAttentionGate:
    def test_map_shape_and_range(self, rng):
        gate = AttentionGate(rng, c_skip=8, c_gate=16)
        skip = Tensor(rng.standard_normal((2, 8, 6, 6, 6)), dtype="f32")
        g = Tensor(rng.standard_normal((2, 16, 6, 6, 6)), dtype="f32")
        m = gate.attention_map(skip, g).data
        assert m.shape == (2, 1, 6, 6, 6)
        assert np.all(m > 0.0) and np.all(m < 1.0)

    def test_map_broadcasts_over_skip_channels(self, rng):
        gate = AttentionGate(rng, 4, 4)
        skip = Tensor(rng.standard_normal((1, 4, 4, 4, 4)), dtype="f32")
        g = Tensor(rng.standard_normal((1, 4, 4, 4, 4)), dtype="f32")
        m = gate.attention_map(skip, g).data
        out = gate(skip, g).data
        for c in range(4):
            np.testing.assert_allclose(out[:, c:c + 1], skip.data[:, c:c + 1] * m,
                                       rtol=1e-6)

    def test_resample_path_matches_manual_upsample(self, rng):
        gate = AttentionGate(rng, 4, 8)
        skip = Tensor(rng.standard_normal((1, 4, 6, 6, 6)), dtype="f32")
        g_small = Tensor(rng.standard_normal((1, 8, 3, 3, 3)), dtype="f32")
        auto = gate(skip, g_small).data
        g_up = ops.trilinear_upsample(g_small, (6, 6, 6))
        np.testing.assert_allclose(auto, gate(skip, g_up).data, rtol=1e-6)

    def test_batch_mismatch_rejected(self, rng):
        gate = AttentionGate(rng, 2, 2)
        skip = Tensor(np.zeros((2, 2, 4, 4, 4), dtype=np.float32))
        g = Tensor(np.zeros((1, 2, 4, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="batch"):
            gate.attention_map(skip, g)

    def test_gradcheck_with_resample(self, rng):
        gate = AttentionGate(rng, 2, 3).to_dtype(np.float64)
        skip = t64(rng, 1, 2, 4, 4, 4)
        g = t64(rng, 1, 3, 2, 2, 2)
        gradcheck(lambda *_: gate(skip, g), [skip, g] + gate.parameters())


class TestModuleContainer:
    def test_declaration_order_is_state_order(self, rng):
        class Net(Module):
            def __init__(self):
                super().__init__()
                self.first = Parameter(np.zeros(2, dtype=np.float32))
                self.inner = ChannelNorm(2)
                self.buf = Buffer(np.zeros(1))

        names = [n for n, _ in Net().named_state()]
        assert names == ["first", "inner.weight", "inner.bias", "buf"]

    def test_freeze_disables_all_gradients(self, rng):
        block = ResidualBlock(rng, 2, 2).freeze()
        assert all(not p.requires_grad for p in block.parameters())
        assert all(m.frozen for _, m in block.named_modules())

    def test_load_state_strict(self, rng):
        norm = ChannelNorm(3)
        good = {k: v.copy() for k, v in norm.state_arrays().items()}
        with pytest.raises(KeyError, match="missing"):
            norm.load_state({"weight": good["weight"]})
        with pytest.raises(KeyError, match="unexpected"):
            norm.load_state({**good, "stray": np.zeros(1)})
        with pytest.raises(ValueError, match="shape"):
            norm.load_state({**good, "bias": np.zeros(4)})

    def test_load_state_roundtrip(self, rng):
        src = ChannelNorm(3)
        src.weight.data[...] = rng.standard_normal(3)
        dst = ChannelNorm(3)
        dst.load_state({k: v.copy() for k, v in src.state_arrays().items()})
        np.testing.assert_array_equal(dst.weight.data, src.weight.data)

    def test_num_parameters(self, rng):
        conv = Conv3d(rng, 2, 3, k=3)
        assert conv.num_parameters() == 3 * 2 * 27 + 3

    def test_to_dtype_casts_state(self, rng):
        conv = Conv3d(rng, 1, 1, k=3, spectral=True).to_dtype(np.float64)
        assert conv.weight.dtype == np.float64
        assert conv.u_state.dtype == np.float64

    def test_module_list_registration(self, rng):
        blocks = ModuleList([ChannelNorm(2), ChannelNorm(2)])
        assert len(blocks) == 2 and blocks[1] is list(blocks)[1]
        names = [n for n, _ in blocks.named_parameters()]
        assert names == ["0.weight", "0.bias", "1.weight", "1.bias"]
