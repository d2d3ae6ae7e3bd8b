"""Forward semantics of the tensor ops: values, shapes, dtypes, errors."""

import numpy as np
import numpy.testing as npt
import pytest

from mcsagan.engine import Tensor, ops


def t(arr, dtype=np.float32, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=requires_grad)


class TestElementwise:
    def test_arithmetic_matches_numpy(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((3, 4)).astype(np.float32)
        npt.assert_allclose(ops.add(t(a), t(b)).numpy(), a + b, rtol=1e-6)
        npt.assert_allclose(ops.sub(t(a), t(b)).numpy(), a - b, rtol=1e-6)
        npt.assert_allclose(ops.mul(t(a), t(b)).numpy(), a * b, rtol=1e-6)
        npt.assert_allclose(ops.div(t(a), t(b + 3)).numpy(), a / (b + 3),
                            rtol=1e-5)
        npt.assert_allclose(ops.neg(t(a)).numpy(), -a)

    def test_broadcasting(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float32)
        b = rng.standard_normal((1, 3, 1)).astype(np.float32)
        npt.assert_allclose(ops.mul(t(a), t(b)).numpy(), a * b, rtol=1e-6)
        assert ops.add(t(a), 2.5).numpy().dtype == np.float32

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(TypeError):
            ops.add(t(np.zeros(3)), t(np.zeros(3), dtype=np.float64))

    def test_unary_matches_numpy(self, rng):
        a = rng.uniform(0.1, 2.0, (5,)).astype(np.float64)
        npt.assert_allclose(ops.exp(t(a, np.float64)).numpy(), np.exp(a))
        npt.assert_allclose(ops.log(t(a, np.float64)).numpy(), np.log(a))
        npt.assert_allclose(ops.sqrt(t(a, np.float64)).numpy(), np.sqrt(a))
        npt.assert_allclose(ops.pow_(t(a, np.float64), 3.0).numpy(), a ** 3)
        npt.assert_allclose(ops.abs_(t(a - 1, np.float64)).numpy(),
                            np.abs(a - 1))

    def test_activations(self, rng):
        a = rng.standard_normal((4, 4)).astype(np.float64)
        npt.assert_allclose(ops.relu(t(a, np.float64)).numpy(),
                            np.maximum(a, 0))
        npt.assert_allclose(ops.leaky_relu(t(a, np.float64), 0.2).numpy(),
                            np.where(a > 0, a, 0.2 * a))
        npt.assert_allclose(ops.sigmoid(t(a, np.float64)).numpy(),
                            1 / (1 + np.exp(-a)), rtol=1e-12)
        npt.assert_allclose(ops.tanh(t(a, np.float64)).numpy(), np.tanh(a))

    def test_softmax_log_softmax(self, rng):
        a = rng.standard_normal((3, 5)).astype(np.float64)
        s = ops.softmax(t(a, np.float64), axis=-1).numpy()
        npt.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
        npt.assert_allclose(np.log(s),
                            ops.log_softmax(t(a, np.float64), axis=-1).numpy(),
                            rtol=1e-10, atol=1e-12)
        # shift invariance: the stable formulation must not overflow
        big = ops.softmax(t(a + 1e4, np.float64), axis=-1).numpy()
        npt.assert_allclose(big, s, rtol=1e-9)


class TestShapeOps:
    def test_reshape_transpose_moveaxis(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float32)
        npt.assert_array_equal(ops.reshape(t(a), (4, 6)).numpy(),
                               a.reshape(4, 6))
        npt.assert_array_equal(ops.transpose(t(a), (2, 0, 1)).numpy(),
                               a.transpose(2, 0, 1))
        npt.assert_array_equal(ops.moveaxis(t(a), 0, 2).numpy(),
                               np.moveaxis(a, 0, 2))

    def test_concat_stack(self, rng):
        a = rng.standard_normal((2, 3)).astype(np.float32)
        b = rng.standard_normal((2, 3)).astype(np.float32)
        npt.assert_array_equal(ops.concat([t(a), t(b)], axis=1).numpy(),
                               np.concatenate([a, b], axis=1))
        npt.assert_array_equal(ops.stack([t(a), t(b)], axis=0).numpy(),
                               np.stack([a, b], axis=0))
        with pytest.raises(ValueError):
            ops.concat([t(a), t(b[:, :2])], axis=0)

    def test_getitem_pad_crop(self, rng):
        a = rng.standard_normal((4, 5)).astype(np.float32)
        npt.assert_array_equal(ops.getitem(t(a), (slice(1, 3),)).numpy(),
                               a[1:3])
        widths = [(1, 2), (0, 3)]
        padded = ops.pad_nd(t(a), widths, value=-1.0).numpy()
        npt.assert_array_equal(padded,
                               np.pad(a, widths, constant_values=-1.0))
        npt.assert_array_equal(ops.crop_nd(t(padded), widths).numpy(), a)

    def test_broadcast_to_and_sum_to_are_adjoint_shapes(self, rng):
        a = rng.standard_normal((1, 3, 1)).astype(np.float32)
        up = ops.broadcast_to(t(a), (2, 3, 4))
        assert up.shape == (2, 3, 4)
        back = ops.sum_to(up, (1, 3, 1))
        npt.assert_allclose(back.numpy(), a * 8, rtol=1e-6)


class TestReductionsAndMatmul:
    def test_sum_mean_axes(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float64)
        npt.assert_allclose(ops.sum_(t(a, np.float64)).numpy(), a.sum())
        npt.assert_allclose(
            ops.sum_(t(a, np.float64), axis=(0, 2)).numpy(), a.sum(axis=(0, 2)))
        npt.assert_allclose(
            ops.mean(t(a, np.float64), axis=1, keepdims=True).numpy(),
            a.mean(axis=1, keepdims=True))

    def test_matmul_batched(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float32)
        b = rng.standard_normal((2, 4, 5)).astype(np.float32)
        npt.assert_allclose(ops.matmul(t(a), t(b)).numpy(), a @ b, rtol=1e-5)

    def test_axis_matmul_equals_tensordot(self, rng):
        x = rng.standard_normal((2, 3, 6, 4, 4)).astype(np.float32)
        m = rng.standard_normal((5, 6)).astype(np.float32)
        got = ops.axis_matmul(t(x), m, axis=2).numpy()
        want = np.moveaxis(np.tensordot(m, x, axes=([1], [2])), 0, 2)
        npt.assert_allclose(got, want, rtol=1e-5)


def naive_conv3d(x, w, stride, padding):
    """Direct six-loop convolution oracle (no flips: correlation)."""
    b, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d + 2 * padding - kd) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, co, od, oh, ow), dtype=np.float64)
    for bi in range(b):
        for oc in range(co):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        patch = xp[bi, :, z * stride:z * stride + kd,
                                   y * stride:y * stride + kh,
                                   xx * stride:xx * stride + kw]
                        out[bi, oc, z, y, xx] = np.sum(patch * w[oc])
    return out


class TestConv3d:
    @pytest.mark.parametrize("k,stride,padding", [
        (3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0),
    ])
    def test_matches_naive_oracle(self, rng, k, stride, padding):
        x = rng.standard_normal((2, 3, 6, 6, 6)).astype(np.float64)
        w = rng.standard_normal((4, 3, k, k, k)).astype(np.float64)
        got = ops.conv3d(t(x, np.float64), t(w, np.float64),
                         stride=stride, padding=padding).numpy()
        npt.assert_allclose(got, naive_conv3d(x, w, stride, padding),
                            rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (4, 2, 1)])
    def test_dual_route_agreement(self, rng, k, stride, padding):
        # production per-tap path vs the im2col reference path
        x = rng.standard_normal((1, 3, 8, 8, 8)).astype(np.float32)
        w = rng.standard_normal((5, 3, k, k, k)).astype(np.float32)
        bias = rng.standard_normal(5).astype(np.float32)
        a = ops.conv3d(t(x), t(w), t(bias), stride=stride, padding=padding)
        b = ops.conv3d_unfold(t(x), t(w), t(bias), stride=stride,
                              padding=padding)
        npt.assert_allclose(a.numpy(), b.numpy(), rtol=1e-5, atol=1e-5)

    def test_bias_and_shape(self, rng):
        x = rng.standard_normal((2, 3, 5, 5, 5)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
        bias = np.array([1.0, -1.0, 0.5, 0.0], dtype=np.float32)
        out = ops.conv3d(t(x), t(w), t(bias), padding=1)
        assert out.shape == (2, 4, 5, 5, 5)
        plain = ops.conv3d(t(x), t(w), padding=1)
        npt.assert_allclose(out.numpy() - plain.numpy(),
                            np.broadcast_to(bias[None, :, None, None, None],
                                            out.shape), rtol=1e-5, atol=1e-6)

    def test_validation_errors(self, rng):
        x = t(np.zeros((2, 3, 5, 5, 5)))
        w = t(np.zeros((4, 3, 3, 3, 3)))
        with pytest.raises(ValueError):
            ops.conv3d(t(np.zeros((3, 5, 5, 5))), w)          # not 5-D
        with pytest.raises(ValueError):
            ops.conv3d(x, t(np.zeros((4, 2, 3, 3, 3))))       # channel mismatch
        with pytest.raises(ValueError):
            ops.conv3d(x, w, stride=0)
        with pytest.raises(ValueError):
            ops.conv3d(x, t(np.zeros((4, 3, 7, 7, 7))))       # empty output
        with pytest.raises(TypeError):
            ops.conv3d(x, t(np.zeros((4, 3, 3, 3, 3)), np.float64))

    def test_unfold_fold_adjoint(self, rng):
        # <unfold(x), y> == <x, fold(y)> defines the exact adjoint pair;
        # both operate on channels-last volumes (B, D, H, W, C)
        k, s, p = (3, 3, 3), 2, 1
        dims, out_dims = (6, 6, 6), (3, 3, 3)
        x = rng.standard_normal((2,) + dims + (4,)).astype(np.float64)
        y = rng.standard_normal((2, 27, 27 * 4)).astype(np.float64)
        ux = ops.unfold3d_cl(t(x, np.float64), k, s, p, out_dims).numpy()
        assert ux.shape == y.shape
        fy = ops.fold3d_cl(t(y, np.float64), k, s, p, out_dims, dims).numpy()
        npt.assert_allclose(np.sum(ux * y), np.sum(x * fy), rtol=1e-12)


class TestPoolingAndResampling:
    def test_avg_pool_matches_reshape_mean(self, rng):
        x = rng.standard_normal((2, 3, 4, 4, 4)).astype(np.float32)
        got = ops.avg_pool3d(t(x), 2).numpy()
        want = x.reshape(2, 3, 2, 2, 2, 2, 2, 2).mean(axis=(3, 5, 7))
        npt.assert_allclose(got, want, rtol=1e-6)

    def test_pool_nd_crops_remainder(self, rng):
        x = rng.standard_normal((1, 2, 5, 4, 7)).astype(np.float32)
        out = ops.pool_nd(t(x), (2, 2, 2))
        assert out.shape == (1, 2, 2, 2, 3)
        want = x[:, :, :4, :, :6].reshape(1, 2, 2, 2, 2, 2, 3, 2)
        npt.assert_allclose(out.numpy(), want.mean(axis=(3, 5, 7)), rtol=1e-6)
        with pytest.raises(ValueError):
            ops.pool_nd(t(x), (6, 2, 2))   # kernel exceeds volume

    def test_trilinear_upsample_partition_of_unity(self):
        x = Tensor(np.full((1, 2, 3, 3, 3), 2.5, dtype=np.float32))
        up = ops.trilinear_upsample(x, (6, 5, 7))
        npt.assert_allclose(up.numpy(), 2.5, rtol=1e-6)
        assert up.shape == (1, 2, 6, 5, 7)

    def test_linear_interp_matrix_endpoints(self):
        m = ops.linear_interp_matrix(4, 8)
        assert m.shape == (8, 4)
        npt.assert_allclose(m.sum(axis=1), 1.0, rtol=1e-12)


class TestNormalize:
    def test_instance_statistics(self, rng):
        x = rng.standard_normal((2, 3, 4, 4, 4)).astype(np.float64) * 5 + 2
        out = ops.normalize(t(x, np.float64), mode="instance").numpy()
        flat = out.reshape(2, 3, -1)
        npt.assert_allclose(flat.mean(axis=2), 0.0, atol=1e-10)
        npt.assert_allclose(flat.std(axis=2), 1.0, rtol=1e-4)

    def test_group_statistics(self, rng):
        x = rng.standard_normal((2, 8, 3, 3, 3)).astype(np.float64)
        out = ops.normalize(t(x, np.float64), mode="group", groups=4).numpy()
        flat = out.reshape(2, 4, -1)
        npt.assert_allclose(flat.mean(axis=2), 0.0, atol=1e-10)

    def test_affine_applied_after_standardization(self, rng):
        x = rng.standard_normal((1, 2, 3, 3, 3)).astype(np.float64)
        w = t(np.array([2.0, 0.5]), np.float64)
        b = t(np.array([1.0, -1.0]), np.float64)
        got = ops.normalize(t(x, np.float64), weight=w, bias=b).numpy()
        base = ops.normalize(t(x, np.float64)).numpy()
        want = base * np.array([2.0, 0.5])[None, :, None, None, None] \
            + np.array([1.0, -1.0])[None, :, None, None, None]
        npt.assert_allclose(got, want, rtol=1e-10)


class TestSpectralTools:
    def test_power_iteration_converges_to_top_sigma(self, rng):
        w = rng.standard_normal((6, 40))
        u0 = rng.standard_normal(6)
        u0 /= np.linalg.norm(u0)
        sigma, u = ops.power_iteration(w, u0, 60)
        top = np.linalg.svd(w, compute_uv=False)[0]
        assert abs(sigma - top) / top < 1e-6
        npt.assert_allclose(np.linalg.norm(u), 1.0, rtol=1e-10)

    def test_spectral_normalize_unit_norm(self, rng):
        w = rng.standard_normal((5, 20)).astype(np.float32)
        u = rng.standard_normal(5)
        u /= np.linalg.norm(u)
        out = ops.spectral_normalize(Tensor(w), u, 30)
        top = np.linalg.svd(out.numpy().reshape(5, 20).astype(np.float64),
                            compute_uv=False)[0]
        assert abs(top - 1.0) < 1e-4

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            ops.spectral_normalize(Tensor(np.zeros((4, 8), np.float32)),
                                   np.ones(4) / 2, 1)
