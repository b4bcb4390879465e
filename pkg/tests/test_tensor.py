"""Autograd core: forward values against independent oracles, gradients
against central finite differences, and tape bookkeeping."""

import math

import numpy as np
import pytest

from conftest import check_gradients, rand_tensor
from ctrank import tensor as T
from ctrank.errors import ConfigError, DataError, NumericError, ShapeError, UsageError
from ctrank.tensor import Tape, Tensor


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop in 64-bit."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)

    def test_dot_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, matmul_oracle(a, b), atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self, rng):
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (4, 2))
        probe = rng.normal(size=(3, 2))
        check_gradients(lambda: T.sum_all(T.mul(T.matmul(a, b), probe)), [a, b])


class TestBmm:
    def test_matches_loop(self, rng):
        a = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        b = rng.normal(size=(2, 3, 5, 2)).astype(np.float32)
        out = T.bmm(Tensor(a), Tensor(b)).data
        expected = np.stack([
            np.stack([matmul_oracle(a[i, j], b[i, j]) for j in range(3)])
            for i in range(2)
        ])
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_gradients(self, rng):
        a = rand_tensor(rng, (2, 3, 4))
        b = rand_tensor(rng, (2, 4, 2))
        probe = rng.normal(size=(2, 3, 2))
        check_gradients(lambda: T.sum_all(T.mul(T.bmm(a, b), probe)), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)

    def test_large_inputs_no_overflow(self):
        out = T.softmax(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-7)

    def test_against_exp_sum_oracle(self):
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        expected = np.exp(x.astype(np.float64))
        expected /= expected.sum()
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, expected, atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(5, 7)).astype(np.float32))
        out = T.softmax(x).data
        assert (out > 0).all() and (out <= 1).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([[np.nan, 0.0]]))
        with pytest.raises(NumericError):
            T.softmax(Tensor([[np.inf, 0.0]]))

    def test_axis_argument(self, rng):
        x = rng.normal(size=(3, 4)).astype(np.float64)
        out = T.softmax(Tensor(x), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    def test_gradients(self, rng):
        x = rand_tensor(rng, (3, 5))
        probe = rng.normal(size=(3, 5))
        check_gradients(lambda: T.sum_all(T.mul(T.softmax(x), probe)), [x])


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        gain = Tensor(np.ones(3))
        bias = Tensor(np.zeros(3))
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), gain, bias)
        np.testing.assert_allclose(out.data, [[0.0, 0.0, 0.0]], atol=1e-6)

    def test_already_normalised(self):
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = T.layer_norm(Tensor([[1.0, -1.0]]), gain, bias, eps=1e-10)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_moments(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 64)).astype(np.float32))
        gain, bias = Tensor(np.ones(64)), Tensor(np.zeros(64))
        out = T.layer_norm(x, gain, bias, eps=1e-8).data.astype(np.float64)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-4)

    def test_eps_must_be_positive(self):
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        with pytest.raises(ConfigError):
            T.layer_norm(Tensor([[1.0, 2.0]]), gain, bias, eps=0.0)

    def test_gradients(self, rng):
        x = rand_tensor(rng, (4, 6))
        gain = rand_tensor(rng, (6,))
        bias = rand_tensor(rng, (6,))
        probe = rng.normal(size=(4, 6))
        check_gradients(
            lambda: T.sum_all(T.mul(T.layer_norm(x, gain, bias), probe)),
            [x, gain, bias],
        )


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = T.gelu(Tensor([8.0, -8.0]))
        np.testing.assert_allclose(out.data[0], 8.0, atol=1e-4)
        np.testing.assert_allclose(out.data[1], 0.0, atol=1e-4)

    def test_reference_value_at_one(self):
        # 0.5 * 1 * (1 + tanh(sqrt(2/pi) * (1 + 0.044715))) in 64-bit
        out = T.gelu(Tensor(np.array([1.0], dtype=np.float32)))
        np.testing.assert_allclose(out.data[0], 0.8411919906082768, atol=1e-6)

    def test_gradients(self, rng):
        x = rand_tensor(rng, (10,), scale=2.0)
        probe = rng.normal(size=(10,))
        check_gradients(lambda: T.sum_all(T.mul(T.gelu(x), probe)), [x])


class TestTanh:
    def test_gradients(self, rng):
        x = rand_tensor(rng, (7,))
        probe = rng.normal(size=(7,))
        check_gradients(lambda: T.sum_all(T.mul(T.tanh(x), probe)), [x])


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        out = T.dropout(x, 0.0, training=True, rng=rng)
        assert out is x

    def test_eval_mode_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.9, training=False, rng=None) is x

    def test_invalid_rate(self, rng):
        x = Tensor(np.ones(3))
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                T.dropout(x, rate, training=True, rng=rng)

    def test_survivor_statistics(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.full(100_000, 2.0, dtype=np.float32))
        out = T.dropout(x, 0.5, training=True, rng=rng).data
        survivors = (out != 0).mean()
        assert 0.49 <= survivors <= 0.51
        # inverted scaling keeps the expectation
        assert abs(out.mean() - 2.0) / 2.0 < 0.02

    def test_gradient_uses_same_mask(self, rng):
        x = rand_tensor(rng, (50,))
        mask = (rng.random(50) >= 0.3).astype(np.float64)
        probe = rng.normal(size=(50,))
        check_gradients(
            lambda: T.sum_all(T.mul(T._dropout_with_mask(x, mask, 0.3), probe)),
            [x],
        )


class TestCrossEntropy:
    def test_uniform_prediction(self):
        loss = T.cross_entropy(Tensor([[0.0, 0.0]]), np.array([1]))
        np.testing.assert_allclose(loss.item(), math.log(2.0), atol=1e-7)

    def test_confident_correct(self):
        loss = T.cross_entropy(Tensor([[-20.0, 20.0]]), np.array([1]))
        assert loss.item() < 1e-6

    def test_against_direct_formula(self, rng):
        logits = rng.normal(size=(16, 2)).astype(np.float32)
        labels = rng.integers(0, 2, size=16)
        z = logits.astype(np.float64)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        expected = -np.log(probs[np.arange(16), labels]).mean()
        loss = T.cross_entropy(Tensor(logits), labels)
        np.testing.assert_allclose(loss.item(), expected, atol=1e-6)

    def test_label_validation(self):
        with pytest.raises(DataError):
            T.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))

    def test_gradients(self, rng):
        logits = rand_tensor(rng, (6, 2))
        labels = rng.integers(0, 2, size=6)
        check_gradients(lambda: T.cross_entropy(logits, labels), [logits])


class TestEmbeddingAndGather:
    def test_out_of_range_id(self):
        table = T.parameter(np.zeros((4, 3)))
        with pytest.raises(DataError):
            T.embedding(table, np.array([[4]]))

    def test_scatter_gradients(self, rng):
        table = rand_tensor(rng, (5, 3))
        ids = np.array([[0, 2, 2], [1, 0, 4]])
        probe = rng.normal(size=(2, 3, 3))
        check_gradients(lambda: T.sum_all(T.mul(T.embedding(table, ids), probe)),
                        [table])

    def test_take_rows_gradients(self, rng):
        x = rand_tensor(rng, (6, 3))
        idx = np.array([5, 0, 0, 3])
        probe = rng.normal(size=(4, 3))
        check_gradients(lambda: T.sum_all(T.mul(T.take_rows(x, idx), probe)), [x])


class TestMaskedMean:
    def test_all_pad_row_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        mask = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(DataError):
            T.masked_mean(x, mask)

    def test_matches_plain_mean_without_padding(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        out = T.masked_mean(x, np.ones((2, 3)))
        np.testing.assert_allclose(out.data, x.data.mean(axis=1), atol=1e-6)

    def test_gradients(self, rng):
        x = rand_tensor(rng, (2, 4, 3))
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=np.float64)
        probe = rng.normal(size=(2, 3))
        check_gradients(lambda: T.sum_all(T.mul(T.masked_mean(x, mask), probe)),
                        [x])


class TestShapeOps:
    def test_reshape_transpose_gradients(self, rng):
        x = rand_tensor(rng, (2, 3, 4))
        probe = rng.normal(size=(4, 6))

        def loss():
            y = T.transpose(x, (2, 0, 1))
            return T.sum_all(T.mul(T.reshape(y, (4, 6)), probe))

        check_gradients(loss, [x])

    def test_add_broadcast_gradients(self, rng):
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (4,))
        probe = rng.normal(size=(3, 4))
        check_gradients(lambda: T.sum_all(T.mul(T.add(a, b), probe)), [a, b])


class TestTapeAndBackward:
    def test_quadratic(self):
        w = T.parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            loss = T.sum_all(T.mul(w, w))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, [2.0, 4.0], atol=1e-6)

    def test_loss_grad_is_one(self):
        w = T.parameter(np.array([3.0]))
        with Tape() as tape:
            loss = T.sum_all(T.mul(w, w))
        tape.backward(loss)
        np.testing.assert_array_equal(loss.grad, np.ones(()))

    def test_matmul_chain_finite_difference(self, rng):
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (4, 5))
        c = rand_tensor(rng, (5, 2))
        probe = rng.normal(size=(3, 2))
        check_gradients(
            lambda: T.sum_all(T.mul(T.matmul(T.matmul(a, b), c), probe)),
            [a, b, c], h=1e-3, rtol=1e-4,
        )

    def test_disconnected_parameter_gets_no_gradient(self):
        w = T.parameter(np.array([1.0, 2.0]))
        other = T.parameter(np.array([5.0]))
        with Tape() as tape:
            loss = T.sum_all(T.mul(w, w))
        tape.backward(loss)
        assert other.grad is None

    def test_reused_tensor_accumulates_once_per_use(self):
        w = T.parameter(np.array([3.0]))
        with Tape() as tape:
            loss = T.sum_all(T.add(T.mul(w, w), w))  # w^2 + w
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, [7.0], atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        w = T.parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            out = T.mul(w, w)
        with pytest.raises(UsageError):
            tape.backward(out)

    def test_foreign_loss_rejected(self):
        w = T.parameter(np.array([1.0]))
        with Tape() as t1:
            loss = T.sum_all(T.mul(w, w))
        with Tape() as t2:
            pass
        with pytest.raises(UsageError):
            t2.backward(loss)

    def test_no_recording_without_tape(self):
        w = T.parameter(np.array([1.0]))
        out = T.mul(w, w)
        assert out.requires_grad is False and out.tape_id == 0


class TestInvariants:
    def test_shape_matches_buffer(self, rng):
        t = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        assert t.data.size == 12 and t.data.shape == (3, 4)

    def test_assert_finite(self):
        T.assert_finite(Tensor([1.0, 2.0]))
        with pytest.raises(NumericError):
            T.assert_finite(Tensor([1.0, np.nan]))
        with pytest.raises(NumericError, match="logits"):
            T.assert_finite(Tensor([np.inf]), context="logits")

    def test_grad_shape_mirrors_data(self, rng):
        w = T.parameter(rng.normal(size=(3, 2)))
        with Tape() as tape:
            loss = T.sum_all(T.mul(w, w))
        tape.backward(loss)
        assert w.grad.shape == w.data.shape

    def test_float32_default_storage(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        assert Tensor(np.zeros(3, dtype=np.int64)).dtype == np.float32
