import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptqa import tensor as F
from promptqa.errors import ConfigError, NumericError, ShapeError
from promptqa.gradcheck import grad_check, relative_error
from promptqa.tensor import Tensor, no_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


class TestMatmul:
    def test_identity(self):
        out = F.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert F.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_matches_finite_differences(self, rng):
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        w = rand(rng, 3, 2)
        report = grad_check(lambda: F.tsum(F.matmul(a, b) * w), [a, b], eps=1e-5, tol=1e-6)
        assert report.passed, report.max_rel_error

    def test_identity_associativity(self, rng):
        a = rand(rng, 4, 5)
        np.testing.assert_allclose(F.matmul(Tensor(np.eye(4)), a).data, a.data, atol=1e-12)
        np.testing.assert_allclose(F.matmul(a, Tensor(np.eye(5))).data, a.data, atol=1e-12)

    def test_batched_broadcast_grad(self, rng):
        w, z = rand(rng, 3, 4), rand(rng, 2, 4, 5)
        probe = rand(rng, 2, 3, 5)
        assert grad_check(lambda: F.tsum(F.matmul(w, z) * probe), [w, z], tol=1e-6).passed


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = F.softmax(Tensor([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_rows_are_distributions(self, x):
        y = F.softmax(Tensor(x), axis=-1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_jacobian(self, rng):
        x = rand(rng, 5)
        w = rand(rng, 5)
        assert grad_check(lambda t: F.tsum(F.softmax(t) * w), x, tol=1e-6).passed

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            F.softmax(Tensor([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = F.layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_point_standardization(self):
        out = F.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_gradients(self, rng):
        x, g, b = rand(rng, 4, 8), rand(rng, 8), rand(rng, 8)
        w = rand(rng, 4, 8)
        report = grad_check(lambda: F.tsum(F.layer_norm(x, g, b) * w), [x, g, b], tol=1e-5)
        assert report.passed, report.max_rel_error

    def test_feature_axis_option(self, rng):
        x = rand(rng, 3, 5)
        cols = F.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), axis=0).data
        rows = F.layer_norm(Tensor(x.data.T), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(cols, rows.T, atol=1e-14)

    def test_gain_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            F.layer_norm(rand(rng, 2, 4), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestElementwise:
    def test_relu(self):
        assert F.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_gelu_values(self):
        x = np.array([-1.0, 0.0, 1.0])
        expected = x * 0.5 * (1 + np.array([math.erf(v / math.sqrt(2)) for v in x]))
        np.testing.assert_allclose(F.gelu(Tensor(x)).data, expected, atol=1e-15)

    def test_dropout_zero_is_identity(self, rng):
        x = rand(rng, 3, 3)
        assert F.dropout(x, 0.0, rng) is x

    def test_dropout_eval_is_identity(self, rng):
        x = rand(rng, 3, 3)
        assert F.dropout(x, 0.5, rng, train=False) is x

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_dropout_bad_probability(self, rng, p):
        with pytest.raises(ConfigError):
            F.dropout(rand(rng, 2), p, rng)

    def test_dropout_scales_kept_values(self):
        x = Tensor(np.ones(10000))
        y = F.dropout(x, 0.25, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
        assert abs(y.mean() - 1.0) < 0.05

    def test_dropout_is_seeded(self):
        x = Tensor(np.ones(50))
        a = F.dropout(x, 0.5, np.random.default_rng(3)).data
        b = F.dropout(x, 0.5, np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)

    def test_cross_entropy_uniform_two_class(self):
        loss = F.cross_entropy_from_logits(Tensor([[0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)

    def test_cross_entropy_class_axis_zero(self, rng):
        logits = rand(rng, 5, 3)
        a = F.cross_entropy_from_logits(logits, [0, 4, 2], axis=0).item()
        b = F.cross_entropy_from_logits(Tensor(logits.data.T), [0, 4, 2]).item()
        assert a == pytest.approx(b, abs=1e-15)

    def test_cross_entropy_grad(self, rng):
        logits = rand(rng, 6, 3)
        assert grad_check(lambda t: F.cross_entropy_from_logits(t, [1, 0, 5], axis=0), logits, tol=1e-6).passed

    @pytest.mark.parametrize(
        "op",
        [
            lambda a, b: a + b,
            lambda a, b: a - b,
            lambda a, b: a * b,
            lambda a, b: F.gelu(a) * b,
            lambda a, b: F.relu(a + 0.1) * b,
            lambda a, b: F.concat([a, b], axis=-1),
            lambda a, b: F.reshape(a, (3, 2)) @ F.reshape(b, (2, 3)),
            lambda a, b: F.transpose(a) * F.swap_last(b),
            lambda a, b: F.getitem(a, (np.array([0, 1, 1]), np.array([2, 0, 2]))) * 2.0,
            lambda a, b: F.log_softmax(a, axis=0) * b,
            lambda a, b: F.mean(a * b, axis=1),
            lambda a, b: F.masked_fill(a, np.array([[True, False, False], [False, True, False]])) * 0 + a * b,
        ],
    )
    def test_op_gradients(self, rng, op):
        a, b = rand(rng, 2, 3), rand(rng, 2, 3)
        probe = {}

        def f():
            out = op(a, b)
            if "w" not in probe:
                probe["w"] = Tensor(np.random.default_rng(1).normal(size=out.shape))
            return F.tsum(out * probe["w"])

        assert grad_check(f, [a, b], tol=1e-6).passed

    def test_leading_batch_broadcast(self, rng):
        bias = rand(rng, 4, 1)
        z = rand(rng, 3, 4, 5)
        w = rand(rng, 3, 4, 5)
        assert grad_check(lambda: F.tsum((z + bias) * w), [bias, z], tol=1e-6).passed


class TestAutodiff:
    def test_frozen_tensor_gets_no_grad(self, rng):
        frozen = rand(rng, 3)
        before = frozen.data.copy()
        x = Tensor(rng.normal(size=3), requires_grad=True)
        F.tsum(x * frozen).backward()
        assert frozen.grad is None
        np.testing.assert_array_equal(frozen.data, before)
        np.testing.assert_array_equal(x.grad, before)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        F.tsum(y + y).backward()
        assert x.grad.tolist() == [8.0]

    def test_grads_accumulate_over_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        F.tsum(x * 3.0).backward()
        F.tsum(x * 3.0).backward()
        assert x.grad.tolist() == [6.0, 6.0]

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        F.tsum(y).backward()
        assert x.grad.tolist() == [1.0]

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_item(self):
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestGradCheck:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0])
        report = grad_check(lambda t: F.tsum(t * t), x, tol=1e-6)
        assert report.passed
        np.testing.assert_allclose(report.analytic[0], [2.0, 4.0])
        np.testing.assert_allclose(report.numeric[0], [2.0, 4.0], atol=1e-8)

    def test_detects_wrong_gradient(self):
        x = Tensor([1.0, 2.0])

        def wrong(t):
            return F._result(np.asarray((t.data**2).sum()), (t,), lambda g: (-2 * t.data * g,))

        report = grad_check(wrong, x, tol=1e-6)
        assert not report.passed
        assert report.max_rel_error > 1.0

    def test_non_finite_value_raises(self):
        with pytest.raises(NumericError):
            grad_check(lambda t: F.tsum(t * np.inf), Tensor([1.0]))

    def test_restores_requires_grad(self):
        x = Tensor([1.0])
        grad_check(lambda t: F.tsum(t * t), x)
        assert not x.requires_grad and x.grad is None

    def test_relative_error_zero_case(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
