"""Per-op gradient checks against central differences, plus graph mechanics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionmix.autodiff import (Value, affine, backward, concat, logsumexp,
                                matvec, mlp_forward, vmax, vmean, vsum)
from motionmix.errors import DimensionError, NumericError
from oracles import finite_difference


def check_op(f, *arrays, h=1e-6, tol=1e-6):
    """f maps Values to a Value; compare backward() against FD per input."""
    vals = [Value(a.copy()) for a in arrays]
    out = f(*vals)
    loss = (out * Value(np.cos(np.arange(out.data.size)).reshape(out.data.shape))).sum()
    backward(loss)
    for i, a in enumerate(arrays):
        def scalar(flat, i=i):
            args = [v.data for v in vals]
            args[i] = flat.reshape(a.shape)
            outs = f(*[Value(x) for x in args])
            w = np.cos(np.arange(outs.data.size)).reshape(outs.data.shape)
            return float((outs.data * w).sum())

        num = finite_difference(scalar, a.reshape(-1).astype(float), h)
        np.testing.assert_allclose(vals[i].grad.reshape(-1), num, rtol=tol,
                                   atol=1e-7)


class TestElementwise:
    def test_add_mul_broadcast_scalar(self, rng):
        a = rng.normal(size=7)
        check_op(lambda x: x * 3.0 + 1.5, a)

    def test_add_mul_div(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5) + 3.0
        check_op(lambda x, y: (x + y) * x / y, a, b)

    def test_pow(self, rng):
        a = rng.normal(size=6) + 2.5
        check_op(lambda x: x**3, a)

    def test_exp_log_sqrt(self, rng):
        a = np.abs(rng.normal(size=5)) + 0.5
        check_op(lambda x: x.exp(), a)
        check_op(lambda x: x.log(), a)
        check_op(lambda x: x.sqrt(), a)

    def test_trig(self, rng):
        a = rng.normal(size=8)
        check_op(lambda x: x.sin() * x.cos(), a)

    def test_tanh_sigmoid_softplus(self, rng):
        a = rng.normal(size=9) * 2
        check_op(lambda x: x.tanh(), a)
        check_op(lambda x: x.sigmoid(), a)
        check_op(lambda x: x.softplus(), a)

    def test_relu_off_kink(self, rng):
        a = rng.normal(size=9)
        a[np.abs(a) < 1e-2] = 0.5
        check_op(lambda x: x.relu(), a)

    def test_minimum_maximum(self, rng):
        a = rng.normal(size=6)
        b = a + np.where(rng.normal(size=6) > 0, 0.3, -0.3)  # keep away from ties
        check_op(lambda x, y: x.minimum(y), a, b)
        check_op(lambda x, y: x.maximum(y), a, b)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Value(np.ones(3)) + Value(np.ones(4))


class TestReductionsAndShaping:
    def test_sum_mean(self, rng):
        a = rng.normal(size=11)
        check_op(lambda x: x.sum(), a)
        check_op(lambda x: x.mean(), a)

    def test_cumsum(self, rng):
        a = rng.normal(size=10)
        check_op(lambda x: x.cumsum(), a)
        v = Value(a)
        np.testing.assert_array_equal(v.cumsum().data, np.cumsum(a))

    def test_getitem(self, rng):
        a = rng.normal(size=10)
        check_op(lambda x: x[2:7], a)
        check_op(lambda x: x[0], a)

    def test_concat(self, rng):
        a, b, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)
        check_op(lambda x, y, z: concat([x, y, z]), a, b, c)

    def test_vsum_vmean_nary(self, rng):
        parts = [rng.normal(size=5) for _ in range(7)]
        check_op(lambda *xs: vsum(list(xs)), *parts)
        check_op(lambda *xs: vmean(list(xs)), *parts)

    def test_vmax(self, rng):
        parts = [rng.normal(size=5) for _ in range(4)]
        flat = np.stack(parts)
        # keep a clear winner per column so FD is valid
        for j in range(5):
            flat[rng.integers(4), j] += 1.0
        check_op(lambda *xs: vmax(list(xs)), *list(flat))

    def test_logsumexp_matches_numpy(self, rng):
        a = rng.normal(size=9) * 5
        out = logsumexp(Value(a))
        expect = np.log(np.exp(a - a.max()).sum()) + a.max()
        assert abs(float(out.data) - expect) < 1e-12
        check_op(lambda x: logsumexp(x), a)

    def test_logsumexp_extreme_values_stable(self):
        a = np.array([1000.0, -1000.0, 999.0])
        out = logsumexp(Value(a))
        assert np.isfinite(out.data)
        backward(out)


class TestFusedLinear:
    def test_affine(self, rng):
        w = rng.normal(size=(4, 6))
        b = rng.normal(size=4)
        x = rng.normal(size=6)
        check_op(lambda W, B, X: affine(W, B, X), w, b, x)

    def test_matvec(self, rng):
        w = rng.normal(size=(3, 5))
        x = rng.normal(size=5)
        check_op(lambda W, X: matvec(W, X), w, x)

    def test_affine_dim_mismatch(self):
        with pytest.raises(DimensionError):
            affine(Value(np.ones((2, 3))), Value(np.ones(2)), Value(np.ones(4)))


class TestGraphMechanics:
    def test_grad_accumulates_on_reuse(self):
        x = Value(np.array([2.0]))
        y = x * x + x * 3.0
        backward(y.sum())
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_returns_node_count(self):
        x = Value(np.ones(3))
        y = (x * 2.0 + 1.0).sum()
        n = backward(y)
        assert n >= 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_raises_with_op_name(self):
        x = Value(np.array([0.0]))
        y = x.log().sum()
        with pytest.raises(NumericError) as e:
            backward(y)
        assert "op=" in str(e.value)

    def test_deep_chain_no_recursion_limit(self):
        x = Value(np.array([1.0]))
        y = x
        for _ in range(5000):
            y = y + 1.0
        backward(y.sum())
        np.testing.assert_allclose(x.grad, [1.0])

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
    @settings(max_examples=30, deadline=None)
    def test_tanh_grad_property(self, xs):
        x = Value(np.asarray(xs))
        y = x.tanh().sum()
        backward(y)
        np.testing.assert_allclose(x.grad, 1.0 - np.tanh(xs) ** 2, atol=1e-12)


class TestNetworks:
    def test_mlp_forward_matches_numpy(self, rng):
        from motionmix.params import ParamBundle, init_mlp_params

        bundle = ParamBundle()
        sizes = [4, 6, 3]
        init_mlp_params(bundle, "m.", sizes, rng)
        x = rng.normal(size=4)
        out = mlp_forward(Value(x), bundle, sizes, "relu", "m.")
        from oracles import mlp_forward_np

        ws = [bundle["m.W0"].data, bundle["m.W1"].data]
        bs = [bundle["m.b0"].data, bundle["m.b1"].data]
        np.testing.assert_allclose(out.data, mlp_forward_np(x, ws, bs), atol=1e-12)

    def test_mlp_gradient_fd(self, rng):
        from motionmix.params import ParamBundle, init_mlp_params

        bundle = ParamBundle()
        sizes = [3, 5, 2]
        init_mlp_params(bundle, "m.", sizes, rng)
        x = rng.normal(size=3)

        def loss_for(vec):
            bundle.set_vector(vec)
            out = mlp_forward(Value(x), bundle, sizes, "tanh", "m.")
            return float((out * out).sum().data)

        base = bundle.get_vector().copy()
        bundle.zero_grad()
        out = mlp_forward(Value(x), bundle, sizes, "tanh", "m.")
        backward((out * out).sum())
        grad = np.concatenate([bundle[n].grad.reshape(-1) for n in bundle.names()])
        num = finite_difference(loss_for, base, 1e-6)
        bundle.set_vector(base)
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)
