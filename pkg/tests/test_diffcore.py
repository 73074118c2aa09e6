import numpy as np
import pytest

from tightmatch import diffcore as dc
from tightmatch.diffcore import Tensor


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_row_times_column(self):
        out = dc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.item() == 11.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        a0 = rng.uniform(-2, 2, size=(3, 4))
        b = Tensor(rng.uniform(-2, 2, size=(4, 2)))
        err = dc.grad_check(lambda a: dc.sum_all(dc.square(dc.matmul(a, b))), a0)
        assert err <= 1e-6


class TestElementwise:
    def test_relu(self):
        out = dc.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert dc.sigmoid(Tensor([[0.0]])).item() == 0.5

    def test_square_backward(self):
        x = Tensor([3.0], requires_grad=True)
        dc.backward(dc.sum_all(dc.square(x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_add_broadcasts_bias_row(self):
        out = dc.add(Tensor(np.ones((3, 2))), Tensor([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]] * 3)

    def test_binary_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_log_clamps_small_values(self):
        out = dc.log(Tensor([[0.0]]))
        assert out.item() == pytest.approx(np.log(1e-12))

    def test_log_rejects_negative(self):
        with pytest.raises(dc.NumericDomainError):
            dc.log(Tensor([[-1.0]]))

    @pytest.mark.parametrize("op", [dc.relu, dc.sigmoid, dc.exp, dc.square])
    def test_unary_gradients(self, op):
        rng = np.random.default_rng(11)
        x0 = rng.uniform(0.2, 2.0, size=(2, 3))
        err = dc.grad_check(lambda x: dc.sum_all(op(x)), x0)
        assert err <= 1e-5


class TestSoftmax:
    def test_uniform_from_equal_logits(self):
        out = dc.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_is_stable(self):
        out = dc.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = dc.softmax_rows(Tensor(rng.normal(size=(6, 5))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        a = dc.softmax_rows(Tensor(x)).data
        b = dc.softmax_rows(Tensor(x + 7.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_jacobian_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-2, 2, size=(4, 5))
        w = Tensor(rng.normal(size=(4, 5)))  # random projection to a scalar
        err = dc.grad_check(lambda x: dc.sum_all(dc.mul(dc.softmax_rows(x), w)), x0)
        assert err <= 1e-6


class TestReductionsAndStructure:
    def test_mean(self):
        assert dc.mean(Tensor([2.0, 4.0])).item() == 3.0

    def test_mean_backward(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        dc.backward(dc.mean(x))
        np.testing.assert_array_equal(x.grad, [0.5, 0.5])

    def test_mean_of_empty_errors(self):
        with pytest.raises(dc.EmptyReductionError):
            dc.mean(Tensor(np.zeros((0, 2))))

    def test_concat_cols_shape(self):
        out = dc.concat_cols(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 2))))
        assert out.shape == (2, 5)

    def test_transpose_backward(self):
        x0 = np.random.default_rng(4).normal(size=(2, 3))
        w = Tensor(np.random.default_rng(5).normal(size=(3, 2)))
        err = dc.grad_check(lambda x: dc.sum_all(dc.mul(dc.transpose(x), w)), x0)
        assert err <= 1e-6

    def test_gather_rows_scatter_adds(self):
        x = Tensor([[1.0], [2.0]], requires_grad=True)
        dc.backward(dc.sum_all(dc.gather_rows(x, [0, 0, 1])))
        np.testing.assert_array_equal(x.grad, [[2.0], [1.0]])


class TestGradReverse:
    def test_forward_is_identity(self):
        out = dc.grad_reverse(Tensor([1.0, 2.0]), 1.0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_backward_negates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        dc.backward(dc.sum_all(dc.grad_reverse(x, 1.0)))
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_zero_coeff_blocks_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        dc.backward(dc.sum_all(dc.grad_reverse(x, 0.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])


class TestBackward:
    def test_mean_of_square(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        dc.backward(dc.mean(dc.square(w)))
        np.testing.assert_array_equal(w.grad, [1.0, 2.0])

    def test_repeated_backward_accumulates(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = dc.mean(dc.square(w))
        dc.backward(loss)
        dc.backward(loss)
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_shared_operand_fanout(self):
        # x used twice: d/dx of x*x + x = 2x + 1
        x = Tensor([3.0], requires_grad=True)
        dc.backward(dc.sum_all(dc.mul(x, x) + x))
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(dc.RankError):
            dc.backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_backward_is_deterministic(self):
        def grads():
            rng = np.random.default_rng(9)
            a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            loss = dc.mean(dc.square(dc.matmul(dc.sigmoid(a), b) + a))
            dc.backward(loss)
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = grads()
        ga2, gb2 = grads()
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


class TestGradCheck:
    def test_sum_of_squares(self):
        err = dc.grad_check(lambda x: dc.sum_all(dc.square(x)), [1.0, 2.0, 3.0])
        assert err <= 1e-8

    def test_linear_is_near_exact(self):
        w = Tensor([[2.0], [-3.0]])
        # exact in real arithmetic; only fp cancellation remains
        err = dc.grad_check(lambda x: dc.matmul(x, w), [[1.0, 5.0]])
        assert err <= 1e-8

    def test_sigmoid_chain_at_zero(self):
        err = dc.grad_check(lambda x: dc.mean(dc.sigmoid(x)), [[0.0, 0.0]])
        assert err <= 1e-6

    def test_randomized_op_chain(self):
        # spec-level invariant: composite chains stay within 1e-5
        rng = np.random.default_rng(17)
        x0 = rng.uniform(-2, 2, size=(3, 4))
        w = Tensor(rng.uniform(-2, 2, size=(4, 3)))

        def f(x):
            h = dc.relu(dc.matmul(x, w))
            return dc.mean(dc.square(dc.sigmoid(h) - 0.3))

        assert dc.grad_check(f, x0) <= 1e-5
