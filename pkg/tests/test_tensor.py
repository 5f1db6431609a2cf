import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from proad import tensor as T
from proad.errors import DimensionError, ParameterError, UsageError
from proad.tensor import Tensor


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(fn(*ts))
    return [t.grad for t in ts]


def fd_of(fn, *arrays):
    arrays = [a.copy() for a in arrays]

    def value():
        with T.no_grad():
            return fn(*[Tensor(a) for a in arrays]).item()

    return [central_difference(value, a, h=1e-6) for a in arrays]


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_gradients_match_finite_differences(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        w = rng.standard_normal((3, 5))

        def f(x, y):
            return T.sum(T.mul(T.matmul(x, y), Tensor(w)))

        for ga, gf in zip(grad_of(f, a, b), fd_of(f, a, b)):
            assert rel_err(ga, gf) < 1e-6

    def test_batched_weight_gradient(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))

        def f(x, y):
            return T.sum(T.mul(T.matmul(x, y), T.matmul(x, y)))

        for ga, gf in zip(grad_of(f, a, b), fd_of(f, a, b)):
            assert rel_err(ga, gf) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    # below about -745 exp() underflows to 0.0 in float64
    @given(st.floats(-700, 1e6, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_elu_plus_one_positive(self, x):
        assert T.elu_plus_one(Tensor([x])).data[0] > 0

    @pytest.mark.parametrize("x", [-2.0, -0.5, 0.5, 2.0])
    def test_gelu_gradient(self, x):
        (g,) = grad_of(lambda t: T.sum(T.gelu(t)), np.array([x]))
        (f,) = fd_of(lambda t: T.sum(T.gelu(t)), np.array([x]))
        assert abs(g[0] - f[0]) / abs(f[0]) < 1e-5

    @pytest.mark.parametrize("op", ["exp", "relu", "elu_plus_one", "gelu", "neg", "sqrt"])
    def test_unary_gradients(self, op, rng):
        x = rng.uniform(0.2, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        if op == "sqrt":
            x = np.abs(x)

        def f(t):
            return T.sum(T.mul(T.elementwise(op, t), Tensor(np.arange(12.0).reshape(3, 4))))

        assert rel_err(grad_of(f, x)[0], fd_of(f, x)[0]) < 1e-6

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_broadcast_gradients(self, op, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.uniform(0.5, 2.0, size=(4,))

        def f(x, y):
            return T.sum(T.mul(T.elementwise(op, x, y), T.elementwise(op, x, y)))

        for ga, gf in zip(grad_of(f, a, b), fd_of(f, a, b)):
            assert ga.shape == gf.shape
            assert rel_err(ga, gf) < 1e-6

    def test_div_scalar(self):
        np.testing.assert_array_equal(T.div_scalar(Tensor([2.0, 4.0]), 2.0).data, [1.0, 2.0])

    def test_not_broadcastable(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestLayerNorm:
    def test_constant_token_is_zero(self):
        out = T.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_mean_equals_beta_mean(self, rng):
        beta = rng.standard_normal(6)
        out = T.layer_norm(Tensor(rng.standard_normal((4, 6))), Tensor(np.ones(6)), Tensor(beta))
        np.testing.assert_allclose(out.data.mean(-1), beta.mean(), atol=1e-9)

    def test_gradient(self, rng):
        x, g, b = rng.standard_normal((2, 3, 5)), rng.standard_normal(5), rng.standard_normal(5)
        w = rng.standard_normal((2, 3, 5))

        def f(x_, g_, b_):
            return T.sum(T.mul(T.layer_norm(x_, g_, b_), Tensor(w)))

        for ga, gf in zip(grad_of(f, x, g, b), fd_of(f, x, g, b)):
            assert rel_err(ga, gf) < 1e-5

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 5))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        x = Tensor(rng.standard_normal(100))
        for training in (True, False):
            np.testing.assert_array_equal(T.dropout(x, 0.0, training, rng).data, x.data)

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.standard_normal(100))
        assert T.dropout(x, 0.3, False, None) is x

    def test_zeroed_fraction(self):
        out = T.dropout(Tensor(np.ones(10 ** 6)), 0.3, True, np.random.default_rng(0))
        assert abs(np.mean(out.data == 0.0) - 0.3) < 0.005

    def test_survivors_are_rescaled(self):
        out = T.dropout(Tensor(np.ones(1000)), 0.5, True, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("prob", [1.0, 1.5, -0.1, float("nan")])
    def test_bad_rate(self, prob):
        with pytest.raises(ParameterError):
            T.dropout(Tensor(np.ones(3)), prob, True, np.random.default_rng(0))


class TestGradHook:
    def _grads(self, x, scale=None):
        xt = Tensor(x.copy(), requires_grad=True)
        h = xt if scale is None else T.attach_grad_hook(xt, scale)
        T.backward(T.sum(T.mul(T.exp(h), h)))
        return xt.grad

    def test_ones_is_bitwise_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(self._grads(x, np.ones_like(x)), self._grads(x))

    def test_zeros_annihilate(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(self._grads(x, np.zeros_like(x)), 0.0)

    def test_single_position_doubles(self, rng):
        x = rng.standard_normal((3, 4))
        scale = np.ones_like(x)
        scale[1, 2] = 2.0
        base, hooked = self._grads(x), self._grads(x, scale)
        assert hooked[1, 2] == 2.0 * base[1, 2]
        mask = scale == 1.0
        np.testing.assert_array_equal(hooked[mask], base[mask])

    def test_forward_unchanged(self, rng):
        x = Tensor(rng.standard_normal(5))
        np.testing.assert_array_equal(T.attach_grad_hook(x, np.full(5, 3.0)).data, x.data)

    @pytest.mark.parametrize("bad", [-1.0, float("inf"), float("nan")])
    def test_rejects_bad_scale(self, bad):
        with pytest.raises(ParameterError):
            T.attach_grad_hook(Tensor(np.ones(2)), np.array([1.0, bad]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.attach_grad_hook(Tensor(np.ones(2)), np.ones(3))


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, 2.0 * x.data)

    def test_every_reachable_node_gets_grad(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = T.exp(x)
        z = T.mul(y, x)
        T.backward(T.sum(z))
        for t in (x, y, z):
            assert t.grad is not None and t.grad.shape == t.shape

    def test_non_scalar_loss(self):
        with pytest.raises(UsageError):
            T.backward(T.exp(Tensor(np.ones(3), requires_grad=True)))

    def test_detached_loss(self):
        with pytest.raises(UsageError):
            T.backward(Tensor(1.0))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.exp(x)
        assert not y.requires_grad

    def test_shared_subexpression_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        y = T.exp(x)
        T.backward(T.sum(T.add(y, y)))
        np.testing.assert_allclose(x.grad, 2 * np.exp(x.data), rtol=1e-15)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_gradient_is_linear_in_loss(self, xs, a, b):
        x0 = np.array(xs)

        def grad(ca, cb):
            x = Tensor(x0.copy(), requires_grad=True)
            T.backward(T.add(T.mul(ca, T.sum(T.exp(x))), T.mul(cb, T.sum(T.mul(x, x)))))
            return x.grad

        np.testing.assert_allclose(grad(a, b), a * grad(1, 0) + b * grad(0, 1), atol=1e-9)
