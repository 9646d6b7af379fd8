"""
Tests for the reverse-mode engine: every primitive against central
differences, closed-form gradients, graph errors and determinism.
"""
import numpy as np
import pytest

from conftest import philox
from models.autodiff import (
    PRIMITIVES, GraphCycleError, IndexRangeError, NonFiniteInputError,
    NonScalarRootError, ShapeMismatchError, Tensor, apply, backward, concat,
    cross_entropy, forward_eval, gather, grad_check, grad_check_parameters,
    mse, no_grad, parameter, stop_gradient,
)

TOLERANCE = 1e-4


def _weights(shape, seed=7):
    return Tensor(philox(seed).standard_normal(shape))


# name -> (point shape, scalar function of one Tensor)
PRIMITIVE_CASES = {
    "add": ((3, 4), lambda x: ((x + _weights((4,))) * _weights((3, 4), 1)).sum()),
    "sub": ((3, 4), lambda x: ((_weights((3, 4)) - x) * _weights((3, 4), 2)).sum()),
    "mul": ((3, 4), lambda x: (x * x * _weights((3, 4))).sum()),
    "div": ((3, 4), lambda x: (_weights((3, 4)) / (x * x + 1.0)).sum()),
    "scalar_mul": ((5,), lambda x: ((x * 2.5) * _weights((5,))).sum()),
    "matmul": ((3, 4), lambda x: ((x @ _weights((4, 2))) * _weights((3, 2), 3)).sum()),
    "transpose": ((2, 3, 4), lambda x: (x.transpose((2, 0, 1)) * _weights((4, 2, 3))).sum()),
    "reshape": ((2, 6), lambda x: (x.reshape(3, -1) * _weights((3, 4))).sum()),
    "concat": ((2, 3), lambda x: (concat([x, x * x], axis=1) * _weights((2, 6))).sum()),
    "slice": ((4, 5), lambda x: (x[1:3, ::2] * _weights((2, 3))).sum()),
    "gather": ((5, 3), lambda x: (gather(x, np.array([[0, 4], [4, 2]])) * _weights((2, 2, 3))).sum()),
    "softmax": ((3, 5), lambda x: (x.softmax() * _weights((3, 5))).sum()),
    "log": ((6,), lambda x: ((x * x + 1.0).log() * _weights((6,))).sum()),
    "exp": ((6,), lambda x: ((x * 0.5).exp() * _weights((6,))).sum()),
    "cos": ((6,), lambda x: (x.cos() * _weights((6,))).sum()),
    "sin": ((6,), lambda x: (x.sin() * _weights((6,))).sum()),
    "sqrt": ((6,), lambda x: ((x * x + 0.5).sqrt() * _weights((6,))).sum()),
    "sigmoid": ((6,), lambda x: (x.sigmoid() * _weights((6,))).sum()),
    "mean": ((3, 4), lambda x: ((x * x).mean(axis=0) * _weights((4,))).sum()),
    "sum": ((3, 4), lambda x: ((x * x).sum(axis=1, keepdims=True) * _weights((3, 1))).sum()),
    "masked_fill": ((3, 3), lambda x: (x.masked_fill(np.eye(3, dtype=bool), 0.0) * _weights((3, 3))).sum()),
    "cross_entropy": ((4, 6), lambda x: cross_entropy(x, np.array([0, 5, 2, 2]))),
    "mse": ((3, 4), lambda x: mse(x, _weights((3, 4)))),
}


class TestPrimitiveGradients:
    def test_every_registered_primitive_has_a_case(self):
        # detach has no finite-difference counterpart; covered in TestClosedForms
        assert set(PRIMITIVES) - {"detach"} == set(PRIMITIVE_CASES)

    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_grad_check_at_random_points(self, name):
        shape, f = PRIMITIVE_CASES[name]
        rng = philox(sum(map(ord, name)))
        for _ in range(10):
            point = rng.standard_normal(shape)
            assert grad_check(f, point, step=1e-3) < TOLERANCE


class TestClosedForms:
    def test_sum_of_squares_gradient(self):
        x = parameter(np.array([1.0, 2.0, 3.0]))
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_softmax_values_and_ties(self):
        out = Tensor(np.array([1.0, 2.0, 3.0])).softmax().data
        np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
        np.testing.assert_allclose(Tensor(np.array([0.0, 0.0])).softmax().data, [0.5, 0.5])

    def test_softmax_survives_huge_logits(self):
        out = Tensor(np.array([1000.0, 0.0])).softmax().data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_matmul_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal((Tensor(x) @ Tensor(np.eye(3))).data, x)

    def test_mse_value_and_gradient(self):
        a = parameter(np.array([3.0]))
        loss = mse(a, Tensor(np.array([0.0])))
        backward(loss)
        assert loss.item() == 9.0
        np.testing.assert_array_equal(a.grad, [6.0])

    def test_stop_gradient_blocks_flow(self):
        x = parameter(np.array([1.0, -2.0]))
        y = parameter(np.array([3.0, 4.0]))
        backward((stop_gradient(x) * y).sum())
        assert x.grad is None or not x.grad.any()
        np.testing.assert_array_equal(y.grad, [1.0, -2.0])

    def test_saturated_cross_entropy_is_zero(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 3] = 1e9
        assert cross_entropy(Tensor(logits), np.array([1, 3])).item() == 0.0

    def test_leaf_gradients_accumulate(self):
        x = parameter(np.array([1.0, 2.0]))
        backward((x * 3.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_reused_node_sums_contributions(self):
        x = parameter(np.array([2.0]))
        y = x * x
        backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_grad_check_quadratic(self):
        assert grad_check(lambda x: (x * x).sum(), np.array([1.0, -2.0]), step=1e-3) < 1e-6


class TestGraphErrors:
    def test_shape_mismatch_names_primitive(self):
        with pytest.raises(ShapeMismatchError) as info:
            apply("add", Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
        assert info.value.primitive == "add"
        assert "(2, 3)" in str(info.value)

    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_gather_out_of_range(self):
        with pytest.raises(IndexRangeError):
            gather(Tensor(np.ones((3, 2))), np.array([3]))

    def test_non_scalar_root(self):
        x = parameter(np.ones(2))
        with pytest.raises(NonScalarRootError):
            backward(x * 2.0)

    def test_cycle_is_detected(self):
        x = parameter(np.ones(2))
        a = x + 1.0
        b = a * 2.0
        a._parents = (b,)
        with pytest.raises(GraphCycleError):
            backward(b.sum())

    def test_forward_eval_rejects_non_finite_leaves(self):
        x = Tensor(np.array([1.0, np.nan]), name="x")
        with pytest.raises(NonFiniteInputError):
            forward_eval((x * 2.0).sum())

    def test_grad_check_rejects_non_finite_point(self):
        with pytest.raises(NonFiniteInputError):
            grad_check(lambda x: x.sum(), np.array([np.inf]))

    def test_no_grad_records_nothing(self):
        x = parameter(np.ones(3))
        with no_grad():
            y = (x * x).sum()
        assert y.is_leaf and not y.requires_grad


class TestDeterminism:
    def test_two_runs_are_bit_identical(self):
        def run():
            rng = philox(5)
            w = parameter(rng.standard_normal((4, 3)))
            x = Tensor(rng.standard_normal((6, 4)))
            loss = cross_entropy(x @ w, np.array([0, 1, 2, 0, 1, 2]))
            backward(loss)
            return loss.data.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_dtype_is_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert x.dtype == "F32"
        assert (x * 2.0 + x).dtype == "F32"
        assert Tensor(np.ones(3)).dtype == "F64"


class TestParameterGradCheck:
    def test_named_parameters_of_small_regression(self):
        rng = philox(11)
        w = parameter(rng.standard_normal((3, 2)))
        b = parameter(rng.standard_normal(2))
        x = Tensor(rng.standard_normal((5, 3)))
        target = Tensor(rng.standard_normal((5, 2)))
        errors = grad_check_parameters(lambda: mse((x @ w + b).sigmoid(), target), {"w": w, "b": b})
        assert set(errors) == {"w", "b"}
        assert max(errors.values()) < TOLERANCE
