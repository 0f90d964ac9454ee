"""
Tests for the tape autodiff and the finite-difference checker.
"""

import numpy as np
import pytest

from triplet import tensor as T
from triplet.errors import ShapeError, TripletError
from triplet.gradcheck import grad_check
from triplet.tensor import ComputationTape, Tensor, backward, gradients, no_grad


# =============================================================================
# backward
# =============================================================================

class TestBackward:

    def test_quadratic_gradient_is_x(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(x * x) * 0.5
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_full_reductions_give_scalar_losses(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        with ComputationTape() as tape:
            total = T.tsum(x * x)
            average = T.mean(x)
            loss = total * 0.5 + average
        assert total.shape == () and average.shape == () and loss.shape == ()
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, x.data + 1.0 / x.size, rtol=1e-5)

    def test_scalar_tensor_keeps_zero_rank(self):
        assert Tensor(2.5).shape == ()
        assert Tensor(np.float32(1.0)).shape == ()
        assert T.getitem(Tensor(np.arange(4.0)), 2).shape == ()

    def test_constant_loss_gives_zero_gradients(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(Tensor(np.full((2, 2), 3.0)))
        backward(loss, tape, leaves=[x])
        assert np.array_equal(x.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ComputationTape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_tape_is_consumed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(x)
        backward(loss, tape)
        assert tape.consumed and len(tape) == 0
        with pytest.raises(TripletError):
            backward(loss, tape)
        with pytest.raises(TripletError):
            with tape:
                pass

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with ComputationTape() as tape:
                loss = T.tsum(x * 3.0)
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_gradients_leave_tape_reusable(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(x * x)
        (g,) = gradients(loss, tape, [x])
        np.testing.assert_allclose(g, [2.0, -4.0])
        assert x.grad is None and not tape.consumed
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, -4.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with ComputationTape() as tape:
            with no_grad():
                y = T.tsum(x * 2.0)
        assert len(tape) == 0
        assert not y.requires_grad

    def test_nested_tapes_record_separately(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ComputationTape() as outer:
            a = T.tsum(x)
            with ComputationTape() as inner:
                b = T.tsum(x * 2.0)
            total = a + T.tsum(x * 3.0)
        assert len(inner) == 2
        assert len(outer) == 4
        backward(b, inner)
        np.testing.assert_allclose(x.grad, [2.0, 2.0])
        x.zero_grad()
        backward(total, outer)
        np.testing.assert_allclose(x.grad, [4.0, 4.0])


# =============================================================================
# Primitives
# =============================================================================

class TestPrimitives:

    def test_broadcast_mismatch_raises_shape_error(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
        assert exc.value.op == "add"
        assert (2, 3) in exc.value.shapes

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((3,)), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(a * b)
        backward(loss, tape)
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_fancy_index_gradient_accumulates_repeats(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.tsum(x[np.array([0, 0, 2])])
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 0.0, 1.0, 0.0])

    def test_softmax_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.standard_normal((5, 7)) * 50))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), rtol=1e-6)

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-7)

    def test_dropout_is_identity_outside_training(self, rng):
        x = Tensor(np.ones(10))
        assert T.dropout(x, 0.5, rng, training=False) is x

    def test_upsample_nearest_repeats_voxels(self):
        x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
        up = T.upsample_nearest(x)
        assert up.shape == (1, 1, 4, 4, 4)
        assert up.data[0, 0, 3, 3, 3] == 7.0

    @pytest.mark.parametrize("op", [T.exp, T.sin, T.gelu, T.sigmoid, lambda t: T.softmax(t, axis=-1)])
    def test_smooth_primitives_pass_grad_check(self, op, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        report = grad_check(lambda t: T.tsum(op(t) * op(t)), x)
        assert report.passed, report.summary()

    def test_structural_primitives_pass_grad_check(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        w = Tensor(rng.standard_normal((4, 5)))

        def f(t):
            y = T.transpose(T.reshape(t, (6, 4)), (1, 0))
            z = T.concat([T.flip(y, 0), T.pad(y, ((0, 0), (1, 1)))], axis=1)
            return T.tsum(T.matmul(T.transpose(z, (1, 0)), w) ** 2)

        report = grad_check(f, x)
        assert report.passed, report.summary()


# =============================================================================
# grad_check
# =============================================================================

class TestGradCheck:

    def test_sum_has_unit_gradient_and_zero_error(self, rng):
        x = Tensor(rng.standard_normal(6))
        report = grad_check(T.tsum, x)
        np.testing.assert_array_equal(report.analytic, np.ones(6))
        assert report.max_error == pytest.approx(0.0, abs=1e-9)

    def test_sin_matches_cosine(self, rng):
        x = Tensor(rng.uniform(-3, 3, size=10))
        report = grad_check(lambda t: T.tsum(T.sin(t)), x, tol=1e-4)
        assert report.passed, report.summary()
        np.testing.assert_allclose(report.analytic, np.cos(x.data.astype(np.float64)), rtol=1e-6)

    def test_relu_kink_is_flagged_and_excluded(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        report = grad_check(lambda t: T.tsum(T.relu(t)), x)
        assert report.kinks[0]
        assert report.n_kinks == 1
        assert report.passed

    def test_wrong_gradient_is_reported(self):
        def broken(t):
            out = T._make(np.sum(t.data ** 2), (t,), "broken", lambda g: (g * t.data,))
            return out

        report = grad_check(broken, Tensor(np.array([1.0, 2.0])))
        assert not report.passed
        assert report.failures == 2

    def test_subset_probing(self, rng):
        x = Tensor(rng.standard_normal(100))
        report = grad_check(lambda t: T.tsum(t * t), x, max_elements=10)
        assert int(report.checked.sum()) == 10
        assert report.passed
