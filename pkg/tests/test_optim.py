"""Adam arithmetic, divergence policy, state round-trips, LR schedule."""

import numpy as np
import numpy.testing as npt
import pytest

from mcsagan.engine import Adam, MultiStepLR, Tensor, ops
from mcsagan.engine.module import Parameter


def make_param(arr):
    return Parameter(np.asarray(arr, dtype=np.float32))


class TestAdam:
    def test_single_step_closed_form(self):
        # beta1=0: m = g, v = (1-b2) g^2; bias correction at t=1
        p = make_param([1.0])
        opt = Adam([p], lr=0.1, beta1=0.0, beta2=0.9)
        p.grad = Tensor(np.array([0.5], dtype=np.float32))
        opt.step()
        m_hat = 0.5
        v_hat = (1 - 0.9) * 0.25 / (1 - 0.9)
        want = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        npt.assert_allclose(p.data, want, rtol=1e-6)

    def test_momentum_variant_closed_form(self):
        p = make_param([2.0])
        opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999)
        p.grad = Tensor(np.array([1.0], dtype=np.float32))
        opt.step()
        # t=1 bias correction makes the step exactly lr * g / (|g| + eps)
        npt.assert_allclose(p.data, 2.0 - 0.01 * (1 / (1 + 1e-8)), rtol=1e-6)

    def test_converges_on_quadratic(self):
        p = make_param([5.0, -3.0])
        opt = Adam([p], lr=0.05, beta1=0.0, beta2=0.9)
        for _ in range(600):
            t = Tensor(p.data.copy(), requires_grad=True)
            loss = ops.sum_(ops.mul(t, t))
            loss.backward()
            p.grad = Tensor(t.grad.numpy())
            opt.step()
        # without momentum Adam plateaus at ~lr/2 oscillation near the optimum
        assert np.abs(p.data).max() < 0.05

    def test_nonfinite_grad_aborts(self):
        p = make_param([1.0])
        opt = Adam([p])
        p.grad = Tensor(np.array([np.nan], dtype=np.float32))
        with pytest.raises(FloatingPointError):
            opt.step()
        p.grad = Tensor(np.array([np.inf], dtype=np.float32))
        with pytest.raises(FloatingPointError):
            opt.step()

    def test_skips_params_without_grad(self):
        p, q = make_param([1.0]), make_param([2.0])
        opt = Adam([p, q], lr=0.1)
        p.grad = Tensor(np.array([1.0], dtype=np.float32))
        opt.step()
        npt.assert_allclose(q.data, 2.0)
        assert p.data[0] != 1.0

    def test_state_roundtrip_bitwise(self, rng):
        def run(steps, opt, params):
            got = []
            for s in range(steps):
                for p in params:
                    p.grad = Tensor(
                        rng.standard_normal(p.data.shape).astype(np.float32))
                opt.step()
                got.append([p.data.copy() for p in params])
            return got

        rng = np.random.default_rng(7)
        params = [make_param(np.ones(4)), make_param(np.zeros((2, 2)))]
        opt = Adam(params, lr=0.05)
        run(3, opt, params)
        # state_arrays hands out live views; snapshot like a checkpoint would
        saved = {k: v.copy() for k, v in opt.state_arrays("o").items()}
        saved_params = [p.data.copy() for p in params]
        count = opt.step_count

        rng = np.random.default_rng(11)
        tail_a = run(2, opt, params)

        params2 = [make_param(saved_params[0]), make_param(saved_params[1])]
        opt2 = Adam(params2, lr=0.05)
        opt2.load_state_arrays("o", saved, count)
        rng = np.random.default_rng(11)
        tail_b = run(2, opt2, params2)
        for a, b in zip(tail_a, tail_b):
            for pa, pb in zip(a, b):
                npt.assert_array_equal(pa, pb)


class TestMultiStepLR:
    def test_closed_form_schedule(self):
        opt = Adam([make_param([0.0])], lr=1e-4)
        sched = MultiStepLR([opt], 1e-4, (80, 140, 200), 0.5)
        assert sched.lr_at(1) == 1e-4
        assert sched.lr_at(79) == 1e-4
        assert sched.lr_at(80) == 5e-5
        assert sched.lr_at(140) == 2.5e-5
        assert sched.lr_at(141) == 2.5e-5
        assert sched.lr_at(200) == 1.25e-5
        assert sched.lr_at(1000) == 1.25e-5

    def test_apply_sets_all_optimizers(self):
        a, b = Adam([make_param([0.0])]), Adam([make_param([0.0])])
        sched = MultiStepLR([a, b], 2e-3, (5,), 0.1)
        lr = sched.apply(5)
        assert lr == pytest.approx(2e-4)
        assert a.lr == b.lr == lr

    def test_duplicate_milestones_rejected(self):
        with pytest.raises(ValueError):
            MultiStepLR([], 1e-4, (80, 80), 0.5)
        # unsorted input is normalized, not rejected
        assert MultiStepLR([], 1e-4, (140, 80), 0.5).milestones == (80, 140)
