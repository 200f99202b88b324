import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffproto.numerics import (
    NumericsError,
    RngStream,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    cross_entropy_with_logits,
    gather_rows,
    gaussian,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    narrow,
    normalize_rows,
    pairwise_sqdist,
    parameter,
    reshape,
    softmax,
    tmean,
    transpose,
    tsum,
)


from gradcheck import assert_grad_matches_fd, autodiff_grad, finite_difference


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float64))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_grad_of_sum_against_fd(self):
        a = parameter(np.eye(2), dtype=np.float64)
        b = Tensor(np.array([[2.0, 3.0], [4.0, 5.0]]))
        (grad,) = autodiff_grad(lambda: tsum(matmul(a, b)), a)
        np.testing.assert_allclose(grad, [[5.0, 9.0], [5.0, 9.0]], rtol=1e-12)
        assert_grad_matches_fd(lambda: tsum(matmul(a, b)), [a])

    def test_both_sides_grad(self):
        rng = RngStream(11)
        a = parameter(rng.standard_normal((3, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((4, 2)), dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 2)))
        assert_grad_matches_fd(lambda: tsum(mul(matmul(a, b), w)), [a, b])

    def test_batched_and_shared_rhs(self):
        rng = RngStream(12)
        a = parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((2, 4, 3)), dtype=np.float64)
        c = parameter(rng.standard_normal((4, 5)), dtype=np.float64)
        assert_grad_matches_fd(lambda: tsum(matmul(a, b)), [a, b])
        assert_grad_matches_fd(lambda: tsum(matmul(a, c)), [a, c])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 3\]"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0], dtype=np.float64))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-15)

    def test_shift_invariance(self):
        base = softmax(Tensor([0.0, 1.0], dtype=np.float64)).data
        for c in (-100.0, 3.7, 250.0):
            out = softmax(Tensor([c, c + 1.0], dtype=np.float64)).data
            np.testing.assert_allclose(out, base, atol=1e-12)

    def test_two_point_value(self):
        # e^0 / (e^0 + e^-4), evaluated in 40-digit precision and frozen
        out = softmax(Tensor([0.0, -4.0], dtype=np.float64))
        np.testing.assert_allclose(
            out.data, [0.9820137900379084, 0.017986209962091558], rtol=1e-14
        )

    def test_nan_input_rejected(self):
        with pytest.raises(NumericsError):
            softmax(Tensor([0.0, np.nan]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, seed):
        x = RngStream(seed).standard_normal((4, 7)) * 30.0
        s = softmax(Tensor(x, dtype=np.float64)).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-12)
        s32 = softmax(Tensor(x, dtype=np.float32)).data.sum(axis=-1)
        np.testing.assert_allclose(s32, 1.0, atol=1e-6)

    def test_grad(self):
        x = parameter(RngStream(5).standard_normal((3, 4)), dtype=np.float64)
        w = Tensor(RngStream(6).standard_normal((3, 4)))
        assert_grad_matches_fd(lambda: tsum(mul(softmax(x), w)), [x])


class TestLayerNorm:
    def _affine(self, d, dtype=np.float64):
        return Tensor(np.ones(d, dtype=dtype)), Tensor(np.zeros(d, dtype=dtype))

    def test_constant_row_is_zero(self):
        gain, bias = self._affine(5)
        out = layer_norm(Tensor(np.full((2, 5), 3.3), dtype=np.float64), gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-10)

    def test_two_point_row(self):
        gain, bias = self._affine(2)
        out = layer_norm(Tensor([[1.0, -1.0]], dtype=np.float64), gain, bias)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_grad(self):
        rng = RngStream(7)
        x = parameter(rng.standard_normal((3, 6)), dtype=np.float64)
        gain = parameter(rng.standard_normal(6) * 0.3 + 1.0, dtype=np.float64)
        bias = parameter(rng.standard_normal(6) * 0.1, dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 6)))
        assert_grad_matches_fd(
            lambda: tsum(mul(layer_norm(x, gain, bias), w)), [x, gain, bias]
        )


class TestBackward:
    def test_square(self):
        x = parameter([3.0], dtype=np.float64)
        with Tape() as tape:
            loss = tsum(mul(x, x))
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x], [6.0])

    def test_minimum_of_distance(self):
        x = parameter([1.0, -2.0], dtype=np.float64)
        y = Tensor([1.0, -2.0], dtype=np.float64)
        with Tape() as tape:
            d = x - y
            loss = tsum(mul(d, d))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x], [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            y = x + x
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_no_grad_leaves_untouched(self):
        x = Tensor([1.0, 2.0])  # requires_grad=False
        w = parameter([3.0, 4.0], dtype=np.float64)
        with Tape() as tape:
            loss = tsum(mul(x, w))
        grads = backward(tape, loss)
        assert x not in grads and x.grad is None
        np.testing.assert_allclose(grads[w], [1.0, 2.0])

    def test_accumulation_over_reuse(self):
        x = parameter([2.0], dtype=np.float64)
        with Tape() as tape:
            loss = tsum(mul(x, x) + x)  # x^2 + x -> 2x + 1 = 5
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x], [5.0])


class TestShapeRules:
    def test_leading_batch_broadcast_ok(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.ones((3, 4)))
        assert (a + b).shape == (2, 3, 4)

    def test_inner_broadcast_rejected(self):
        with pytest.raises(ShapeError, match=r"\[5, 1\].*\[5, 3\]"):
            Tensor(np.ones((5, 1))) + Tensor(np.ones((5, 3)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ShapeError, match="mixed dtypes"):
            Tensor(np.ones(3), dtype=np.float32) + Tensor(np.ones(3), dtype=np.float64)

    def test_broadcast_grad_sums_leading(self):
        a = Tensor(RngStream(8).standard_normal((2, 3)), dtype=np.float64)
        b = parameter(np.ones(3), dtype=np.float64)
        (grad,) = autodiff_grad(lambda: tsum(a + b), b)
        np.testing.assert_allclose(grad, [2.0, 2.0, 2.0])


class TestStructuralOps:
    def test_concat_narrow_roundtrip(self):
        rng = RngStream(9)
        a = parameter(rng.standard_normal((2, 3)), dtype=np.float64)
        b = parameter(rng.standard_normal((4, 3)), dtype=np.float64)
        w = Tensor(rng.standard_normal((6, 3)))
        assert_grad_matches_fd(lambda: tsum(mul(concat([a, b]), w)), [a, b])
        assert_grad_matches_fd(lambda: tsum(mul(narrow(concat([a, b]), 0, 1, 3), w.data[1:4])), [a, b])

    def test_gather_rows_scatter_grad(self):
        table = parameter(np.arange(12.0).reshape(4, 3), dtype=np.float64)
        (grad,) = autodiff_grad(lambda: tsum(gather_rows(table, [1, 1, 3])), table)
        np.testing.assert_array_equal(grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])

    def test_transpose_reshape_grads(self):
        rng = RngStream(10)
        x = parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64)
        w = Tensor(rng.standard_normal((4, 6)))
        assert_grad_matches_fd(
            lambda: tsum(mul(reshape(transpose(x, (2, 0, 1)), (4, 6)), w)), [x]
        )

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            narrow(Tensor(np.ones((3, 2))), 0, 2, 2)


class TestReductionsAndActivations:
    def test_mean_sum_grads(self):
        x = parameter(RngStream(13).standard_normal((3, 5)), dtype=np.float64)
        assert_grad_matches_fd(lambda: tmean(mul(x, x)), [x])
        assert_grad_matches_fd(lambda: tsum(tmean(x, axis=1)), [x])
        assert_grad_matches_fd(lambda: tsum(tsum(x, axis=0, keepdims=True)), [x])

    def test_gelu_values_and_grad(self):
        x = parameter(np.linspace(-3, 3, 13), dtype=np.float64)
        out = gelu(x)
        assert out.data[6] == 0.0  # gelu(0) = 0
        assert abs(out.data[-1] - 3.0) < 5e-3  # ~identity for large positive
        w = Tensor(np.linspace(0.5, 1.5, 13), dtype=np.float64)
        assert_grad_matches_fd(lambda: tsum(mul(gelu(x), w)), [x])

    def test_log_softmax_grad(self):
        x = parameter(RngStream(14).standard_normal((4, 6)), dtype=np.float64)
        w = Tensor(RngStream(15).standard_normal((4, 6)))
        assert_grad_matches_fd(lambda: tsum(mul(log_softmax(x), w)), [x])

    def test_pairwise_sqdist_values_and_grad(self):
        x = parameter([[0.0, 0.0], [3.0, 4.0]], dtype=np.float64)
        z = parameter([[0.0, 0.0], [0.0, 4.0]], dtype=np.float64)
        out = pairwise_sqdist(x, z)
        np.testing.assert_allclose(out.data, [[0.0, 16.0], [25.0, 9.0]])
        w = Tensor(RngStream(16).standard_normal((2, 2)))
        assert_grad_matches_fd(lambda: tsum(mul(pairwise_sqdist(x, z), w)), [x, z])

    def test_normalize_rows(self):
        x = parameter([[3.0, 4.0], [0.0, 2.0]], dtype=np.float64)
        out = normalize_rows(x)
        np.testing.assert_allclose(out.data, [[0.6, 0.8], [0.0, 1.0]])
        w = Tensor(RngStream(17).standard_normal((2, 2)))
        assert_grad_matches_fd(lambda: tsum(mul(normalize_rows(x), w)), [x])
        with pytest.raises(NumericsError):
            normalize_rows(Tensor([[0.0, 0.0]]))

    def test_cross_entropy_matches_log_then_index(self):
        rng = RngStream(18)
        logits = rng.standard_normal((6, 5)) * 3.0
        labels = rng.integers(0, 5, size=6)
        out = cross_entropy_with_logits(Tensor(logits, dtype=np.float64), labels)
        # independent oracle: plain log of softmax probabilities, then index
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        naive = -np.log(probs[np.arange(6), labels]).sum()
        np.testing.assert_allclose(out.item(), naive, atol=1e-10)

    def test_cross_entropy_grad_and_errors(self):
        logits = parameter(RngStream(19).standard_normal((4, 3)), dtype=np.float64)
        labels = np.array([0, 2, 1, 1])
        assert_grad_matches_fd(lambda: cross_entropy_with_logits(logits, labels), [logits])
        with pytest.raises(ShapeError, match="label out of range"):
            cross_entropy_with_logits(logits, [0, 1, 2, 3])


class TestRng:
    def test_fixed_seed_reproduces_bytes(self):
        a = RngStream(42).standard_normal(100)
        b = RngStream(42).standard_normal(100)
        assert a.tobytes() == b.tobytes()

    def test_moments(self):
        z = RngStream(123).standard_normal(10**6)
        assert abs(z.mean()) < 0.005
        assert abs(z.var() - 1.0) < 0.01

    def test_distinct_seeds_differ(self):
        a = RngStream(1).standard_normal(10)
        b = RngStream(2).standard_normal(10)
        assert not np.allclose(a, b)

    def test_child_streams_are_stable_and_distinct(self):
        root = RngStream(7)
        c1 = root.child("episode", 3).standard_normal(5)
        c2 = RngStream(7).child("episode", 3).standard_normal(5)
        c3 = root.child("episode", 4).standard_normal(5)
        np.testing.assert_array_equal(c1, c2)
        assert not np.allclose(c1, c3)

    def test_integers_in_range(self):
        v = RngStream(9).integers(2, 7, size=1000)
        assert v.min() >= 2 and v.max() < 7
        assert set(np.unique(v)) == {2, 3, 4, 5, 6}

    def test_permutation_is_permutation(self):
        p = RngStream(10).permutation(50)
        assert sorted(p.tolist()) == list(range(50))

    def test_gaussian_tensor_dtype(self):
        t = gaussian(RngStream(11), (3, 4))
        assert t.dtype == np.float32 and t.shape == (3, 4)


class TestDeterminism:
    def test_ops_are_pure(self):
        rng = RngStream(20)
        x = Tensor(rng.standard_normal((4, 4)), dtype=np.float64)
        a = softmax(x).data.copy()
        b = softmax(x).data.copy()
        np.testing.assert_array_equal(a, b)
