"""Tests for the tensor engine and its reverse pass."""
import math

import numpy as np
import pytest

from app.errors import ContractError, NumericError, ShapeError, UndefinedLossError
from app.services import numerics as nx
from app.services.numerics import Tape, Tensor


class TestElementwise:
    """Forward values and broadcasting of elementwise ops."""

    def test_silu_and_sigmoid_at_zero(self):
        assert nx.silu(Tensor([0.0])).data[0] == 0.0
        assert nx.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_add(self):
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_broadcast_row_vector(self):
        out = Tensor(np.ones((2, 3))) + Tensor([1.0, 2.0, 3.0])
        assert out.shape == (2, 3)
        np.testing.assert_array_equal(out.data[1], [2.0, 3.0, 4.0])

    def test_addition_is_associative(self):
        rng = np.random.default_rng(12)
        a, b, c = (Tensor(rng.standard_normal((4, 5))) for _ in range(3))
        np.testing.assert_allclose(((a + b) + c).data, (a + (b + c)).data, atol=1e-12, rtol=0)

    def test_broadcast_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_elementwise_dispatch(self):
        a = Tensor([1.0, -1.0])
        np.testing.assert_allclose(nx.elementwise("mul", a, a).data, [1.0, 1.0])
        np.testing.assert_allclose(nx.elementwise("softplus", Tensor([0.0])).data, [math.log(2.0)])
        with pytest.raises(ContractError):
            nx.elementwise("mul", a)
        with pytest.raises(ContractError):
            nx.elementwise("tanh", a)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((0, 3)))

    def test_non_finite_output_raises(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NumericError):
                nx.exp(Tensor([1000.0]))


class TestLinearAlgebra:
    def test_matmul_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_matmul_values(self):
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv1d_identity_kernel(self):
        x = Tensor([[1.0], [2.0], [3.0]])
        out = nx.conv1d(x, Tensor(np.ones((1, 1, 1))))
        np.testing.assert_array_equal(out.data[:, 0], [1.0, 2.0, 3.0])

    def test_conv1d_stride_two(self):
        x = Tensor([[1.0], [2.0], [3.0], [4.0]])
        out = nx.conv1d(x, Tensor(np.ones((2, 1, 1))), stride=2)
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 7.0])

    def test_conv1d_too_short(self):
        with pytest.raises(ShapeError):
            nx.conv1d(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1, 1))))

    def test_causal_conv_ignores_future(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 3))
        kernel = Tensor(rng.standard_normal((4, 3)))
        base = nx.causal_depthwise_conv1d(Tensor(x), kernel).data
        x[5] += 1.0
        moved = nx.causal_depthwise_conv1d(Tensor(x), kernel).data
        np.testing.assert_array_equal(base[:5], moved[:5])
        assert not np.allclose(base[5], moved[5])


class TestNormalizationAndLoss:
    def test_layer_norm_constant_row(self):
        out = nx.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_layer_norm_two_values(self):
        out = nx.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)

    def test_cross_entropy_uniform(self):
        loss = nx.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [2], ignore_id=-1)
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_cross_entropy_saturated(self):
        logits = np.zeros((1, 4))
        logits[0, 1] = 1e6
        assert nx.softmax_cross_entropy(Tensor(logits), [1], ignore_id=-1).item() == pytest.approx(0.0, abs=1e-9)

    def test_cross_entropy_ignores_positions(self):
        logits = np.zeros((2, 4))
        logits[1] = [9.0, -3.0, 2.0, 0.5]
        loss = nx.softmax_cross_entropy(Tensor(logits), [3, 0], ignore_id=3)
        expected = -(9.0 - np.log(np.exp(logits[1]).sum()))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_cross_entropy_all_ignored(self):
        with pytest.raises(UndefinedLossError):
            nx.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 0], ignore_id=0)


class TestBackward:
    """Reverse pass over the tape."""

    def test_sum_gives_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            nx.backward(nx.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gives_two_x(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            nx.backward(nx.sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_shared_operand_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            y = x * x + x
            nx.backward(nx.sum(y))
        assert x.grad[0] == pytest.approx(7.0)

    def test_second_pass_doubles_gradient(self):
        w = np.random.default_rng(13).standard_normal(4)
        x = Tensor(np.random.default_rng(14).standard_normal(4), requires_grad=True)
        with Tape():
            nx.backward(nx.sum(x * Tensor(w) + Tensor(np.ones(4))))
        first = x.grad.copy()
        with Tape():
            nx.backward(nx.sum(x * Tensor(w) + Tensor(np.ones(4))))
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * x
            with pytest.raises(ContractError):
                nx.backward(y)

    def test_untaped_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = nx.sum(x)
        with pytest.raises(ContractError):
            nx.backward(loss)

    def test_gradients_leave_grad_untouched(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with Tape():
            gx, gu = nx.gradients(nx.sum(x * x), [x, unused])
        assert x.grad is None
        np.testing.assert_array_equal(gx, [2.0, 4.0])
        np.testing.assert_array_equal(gu, [0.0])

    def test_operations_do_not_mutate_operands(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        before = x.data.copy()
        with Tape():
            nx.backward(nx.sum(nx.silu(x) * x))
        np.testing.assert_array_equal(x.data, before)


class TestGradCheck:
    """Analytic gradients against central differences."""

    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_identity_sum(self):
        assert nx.grad_check(nx.sum, Tensor(self.rng.standard_normal(5)), eps=1e-3) < 1e-9

    def test_exp_at_zero(self):
        assert nx.grad_check(lambda x: nx.sum(nx.exp(x)), Tensor([0.0])) < 1e-8

    def test_eps_range(self):
        with pytest.raises(ContractError):
            nx.grad_check(nx.sum, Tensor([1.0]), eps=1e-2)

    @pytest.mark.parametrize("op", ["sigmoid", "silu", "softplus", "exp"])
    def test_unary(self, op):
        w = self.rng.standard_normal((3, 4))
        err = nx.grad_check(lambda x: nx.sum(nx.elementwise(op, x) * Tensor(w)), Tensor(self.rng.standard_normal((3, 4))))
        assert err < 1e-6

    def test_broadcast_mul(self):
        a = Tensor(self.rng.standard_normal((3, 4)))
        assert nx.grad_check(lambda b: nx.sum(a * b * b), Tensor(self.rng.standard_normal(4))) < 1e-6

    def test_matmul_batched(self):
        b = Tensor(self.rng.standard_normal((4, 2)))
        assert nx.grad_check(lambda a: nx.sum(nx.matmul(a, b) * nx.matmul(a, b)),
                             Tensor(self.rng.standard_normal((2, 3, 4)))) < 1e-6

    def test_conv1d_input_and_kernel(self):
        x = Tensor(self.rng.standard_normal((9, 3)))
        kernel = Tensor(self.rng.standard_normal((3, 3, 2)))
        w = Tensor(self.rng.standard_normal((5, 2)))
        assert nx.grad_check(lambda t: nx.sum(nx.conv1d(t, kernel, stride=2, padding=1) * w), x) < 1e-6
        assert nx.grad_check(lambda k: nx.sum(nx.conv1d(x, k, stride=2, padding=1) * w), kernel) < 1e-6

    def test_causal_depthwise_conv(self):
        kernel = Tensor(self.rng.standard_normal((4, 3)))
        w = Tensor(self.rng.standard_normal((6, 3)))
        x = Tensor(self.rng.standard_normal((6, 3)))
        assert nx.grad_check(lambda t: nx.sum(nx.causal_depthwise_conv1d(t, kernel) * w), x) < 1e-6
        assert nx.grad_check(lambda k: nx.sum(nx.causal_depthwise_conv1d(x, k) * w), kernel) < 1e-6

    def test_layer_norm(self):
        gain = Tensor(self.rng.standard_normal(5))
        bias = Tensor(self.rng.standard_normal(5))
        w = Tensor(self.rng.standard_normal((3, 5)))
        x = Tensor(self.rng.standard_normal((3, 5)))
        assert nx.grad_check(lambda t: nx.sum(nx.layer_norm(t, gain, bias) * w), x) < 1e-6
        assert nx.grad_check(lambda g: nx.sum(nx.layer_norm(x, g, bias) * w), gain) < 1e-6

    def test_cross_entropy(self):
        targets = [1, 4, 0, 2]
        assert nx.grad_check(lambda t: nx.softmax_cross_entropy(t, targets, ignore_id=4),
                             Tensor(self.rng.standard_normal((4, 6)))) < 1e-6

    def test_embedding_concat_take(self):
        ids = [2, 0, 2]

        def f(weight):
            e = nx.embedding(weight, ids)
            joined = nx.concat([e, nx.reshape(weight, (3, 4))], axis=0)
            return nx.sum(nx.take(joined, 1, 5, axis=0) * nx.take(joined, 2, 6, axis=0))

        assert nx.grad_check(f, Tensor(self.rng.standard_normal((3, 4)))) < 1e-6

    def test_sum_and_mean_along_axis(self):
        w = Tensor(self.rng.standard_normal(4))
        assert nx.grad_check(lambda x: nx.mean(nx.sum(x, axis=0) * w), Tensor(self.rng.standard_normal((3, 4)))) < 1e-6


def _weighted(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _overlap_product(x):
    return nx.sum(nx.take(x, 2, 5, axis=0) * nx.take(x, 1, 4, axis=0))


# name -> rng -> (scalar function of one operand, operand)
DIFFERENTIABLE_OPS = {
    "add": lambda r: ((lambda t, b=_weighted(r, (4,)): nx.sum((t + b) * (t + b))), _weighted(r, (3, 4))),
    "sub": lambda r: ((lambda t, b=_weighted(r, (3, 4)): nx.sum((b - t) * (b - t))), _weighted(r, (3, 4))),
    "mul": lambda r: ((lambda t, b=_weighted(r, (3, 1)): nx.sum(t * b * t)), _weighted(r, (3, 4))),
    "scale": lambda r: ((lambda t: nx.sum(nx.scale(t, 2.5) * t)), _weighted(r, (5,))),
    "exp": lambda r: ((lambda t, w=_weighted(r, (5,)): nx.sum(nx.exp(t) * w)), _weighted(r, (5,))),
    "sigmoid": lambda r: ((lambda t, w=_weighted(r, (5,)): nx.sum(nx.sigmoid(t) * w)), _weighted(r, (5,))),
    "silu": lambda r: ((lambda t, w=_weighted(r, (5,)): nx.sum(nx.silu(t) * w)), _weighted(r, (5,))),
    "softplus": lambda r: ((lambda t, w=_weighted(r, (5,)): nx.sum(nx.softplus(t) * w)), _weighted(r, (5,))),
    "sum_axis": lambda r: ((lambda t, w=_weighted(r, (4,)): nx.sum(nx.sum(t, axis=0) * w)), _weighted(r, (3, 4))),
    "mean": lambda r: ((lambda t: nx.mean(t * t)), _weighted(r, (3, 4))),
    "reshape": lambda r: ((lambda t, w=_weighted(r, (2, 6)): nx.sum(nx.reshape(t, (2, 6)) * w)), _weighted(r, (3, 4))),
    "concat_take": lambda r: ((lambda t: _overlap_product(nx.concat([t, t * t], axis=0))), _weighted(r, (3, 2))),
    "embedding": lambda r: ((lambda t: nx.sum(nx.embedding(t, [1, 0, 1]) * nx.embedding(t, [2, 2, 0]))),
                            _weighted(r, (3, 4))),
    "matmul": lambda r: ((lambda t, b=_weighted(r, (4, 2)): nx.sum(nx.matmul(t, b) * nx.matmul(t, b))),
                         _weighted(r, (3, 4))),
    "conv1d": lambda r: ((lambda t, k=_weighted(r, (3, 2, 3)), w=_weighted(r, (4, 3)):
                          nx.sum(nx.conv1d(t, k, stride=2, padding=1) * w)), _weighted(r, (8, 2))),
    "causal_depthwise_conv1d": lambda r: ((lambda t, k=_weighted(r, (4, 3)), w=_weighted(r, (6, 3)):
                                           nx.sum(nx.causal_depthwise_conv1d(t, k) * w)), _weighted(r, (6, 3))),
    "layer_norm": lambda r: ((lambda t, w=_weighted(r, (3, 5)):
                              nx.sum(nx.layer_norm(t, Tensor(np.ones(5)), Tensor(np.zeros(5))) * w)),
                             _weighted(r, (3, 5))),
    "softmax_cross_entropy": lambda r: ((lambda t: nx.softmax_cross_entropy(t, [1, 3, 0], ignore_id=3)),
                                        _weighted(r, (3, 5))),
}


class TestGradCheckSweep:
    """Every differentiable op over ten seeds at the default step."""

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("op", sorted(DIFFERENTIABLE_OPS))
    def test_op(self, op, seed):
        f, x = DIFFERENTIABLE_OPS[op](np.random.default_rng(seed))
        assert nx.grad_check(f, x, eps=1e-5) < 1e-4
