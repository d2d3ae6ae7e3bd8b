"""Reverse-mode machinery: accumulation, graph lifecycle, double backward."""

import numpy as np
import numpy.testing as npt
import pytest

from mcsagan.engine import GradMode, Tensor, grad, gradcheck, no_grad, ops


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class TestBackward:
    def test_chain_rule_scalar(self):
        x = leaf(1.5)
        y = ops.mul(ops.exp(x), x)          # y = x e^x
        y.backward()
        npt.assert_allclose(x.grad.numpy(), (1 + 1.5) * np.exp(1.5),
                            rtol=1e-12)

    def test_fanout_accumulates(self):
        x = leaf([2.0, 3.0])
        y = ops.add(ops.mul(x, x), ops.mul(x, 3.0))   # x^2 + 3x
        ops.sum_(y).backward()
        npt.assert_allclose(x.grad.numpy(), [7.0, 9.0], rtol=1e-12)

    def test_backward_twice_accumulates_into_grad(self):
        x = leaf([1.0, 2.0])
        ops.sum_(ops.mul(x, x)).backward()
        first = x.grad.numpy().copy()
        ops.sum_(ops.mul(x, x)).backward()
        npt.assert_allclose(x.grad.numpy(), 2 * first)

    def test_matmul_grads(self, rng):
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2))
        ops.sum_(ops.mul(ops.matmul(a, b), Tensor(g))).backward()
        npt.assert_allclose(a.grad.numpy(), g @ b.data.T, rtol=1e-10)
        npt.assert_allclose(b.grad.numpy(), a.data.T @ g, rtol=1e-10)

    def test_broadcast_grad_reduces(self):
        x = leaf(np.ones((1, 3)))
        y = leaf(np.ones((4, 1)))
        ops.sum_(ops.mul(x, y)).backward()
        assert x.grad.shape == (1, 3) and y.grad.shape == (4, 1)
        npt.assert_allclose(x.grad.numpy(), 4.0)
        npt.assert_allclose(y.grad.numpy(), 3.0)


class TestGradFunction:
    def test_grad_does_not_touch_leaf_grad(self):
        x = leaf([1.0, 2.0])
        (g,) = grad(ops.sum_(ops.mul(x, x)), x)
        npt.assert_allclose(g.numpy(), [2.0, 4.0])
        assert x.grad is None

    def test_unused_input_raises_without_allow_unused(self):
        x, z = leaf(1.0), leaf(2.0)
        y = ops.mul(x, 2.0)
        with pytest.raises(RuntimeError, match="participate"):
            grad(ops.sum_(y), (x, z))
        gx, gz = grad(ops.sum_(ops.mul(x, 2.0)), (x, z), allow_unused=True)
        assert gz is None and gx is not None

    def test_graph_consumed_after_backward(self):
        x = leaf([1.0])
        y = ops.sum_(ops.mul(x, x))
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_create_graph_enables_second_order(self):
        x = leaf(2.0)
        y = ops.pow_(x, 3.0)                       # d2/dx2 x^3 = 6x
        (g1,) = grad(y, x, create_graph=True)
        (g2,) = grad(ops.sum_(g1), x)
        npt.assert_allclose(g2.numpy(), 12.0, rtol=1e-12)

    def test_second_order_through_conv(self, rng):
        x = leaf(rng.standard_normal((1, 2, 4, 4, 4)))
        w = leaf(rng.standard_normal((2, 2, 3, 3, 3)) * 0.2)
        y = ops.conv3d(x, w, padding=1)
        (gx,) = grad(ops.sum_(ops.mul(y, y)), x, create_graph=True)
        # gx depends on both x and w; FD-check d/dw of sum(gx^2)
        (gw,) = grad(ops.sum_(ops.mul(gx, gx)), w)

        def scalar(wd):
            xv = Tensor(x.data, requires_grad=True)
            yv = ops.conv3d(xv, Tensor(wd), padding=1)
            (gxv,) = grad(ops.sum_(ops.mul(yv, yv)), xv)
            return float(np.sum(gxv.numpy() ** 2))

        eps, i = 1e-5, (0, 1, 1, 2, 0)
        wp = w.data.copy()
        wp[i] += eps
        wm = w.data.copy()
        wm[i] -= eps
        fd = (scalar(wp) - scalar(wm)) / (2 * eps)
        npt.assert_allclose(gw.numpy()[i], fd, rtol=1e-6)


class TestGradMode:
    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad and y.node is None

    def test_detach_cuts_graph(self):
        x = leaf([3.0])
        y = ops.mul(x, x).detach()
        z = ops.mul(y, 2.0)
        assert not z.requires_grad
        npt.assert_allclose(z.numpy(), 18.0)

    def test_nested_no_grad_restores(self):
        assert GradMode.enabled
        with no_grad():
            assert not GradMode.enabled
            with no_grad():
                assert not GradMode.enabled
            assert not GradMode.enabled
        assert GradMode.enabled


class TestFrozenParents:
    def test_constant_branch_gets_no_vjp(self, rng):
        x = leaf(rng.standard_normal((1, 2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=False)
        y = ops.conv3d(x, w, padding=1)
        ops.sum_(y).backward()
        assert x.grad is not None and w.grad is None

    def test_frozen_weight_conv_still_differentiates_input(self, rng):
        x = leaf(rng.standard_normal((1, 1, 4, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)), requires_grad=False)

        def f(xv):
            return ops.sum_(ops.conv3d(xv, w, padding=1))

        gradcheck(f, [x], tol=1e-6)


class TestGradcheckHarness:
    def test_detects_wrong_gradient(self):
        # an op whose declared VJP is off by a factor of two must fail FD
        def bad_square(t):
            out = Tensor.from_op("bad_square", (t,),
                                 t.data * t.data,
                                 lambda g: (ops.mul(g, t),))  # should be 2t
            return ops.sum_(out)

        with pytest.raises(AssertionError):
            gradcheck(bad_square, [leaf(np.array([1.0, 2.0]))], tol=1e-4)

    def test_accepts_correct_gradient(self):
        err = gradcheck(lambda a: ops.sum_(ops.mul(ops.sigmoid(a), a)),
                        [leaf(np.linspace(-2, 2, 9))], tol=1e-6)
        assert err < 1e-6
