import numpy as np
import pytest

from intff.errors import NumericalOverflowError, ShapeError
from intff.numerics import (
    Conv2DLayer,
    DenseLayer,
    finite_diff_grad,
    he_uniform_init,
    l2_normalize,
    l2_normalize_rows,
    matmul,
    mean_square,
    mean_square_rows,
    relu,
    relu_backward,
)


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), [[5.0], [7.0]])
        np.testing.assert_array_equal(out, [[5.0], [7.0]])

    def test_hand_product(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
        np.testing.assert_array_equal(out, [[17.0], [39.0]])

    def test_zero(self):
        out = matmul(np.arange(6.0).reshape(2, 3), np.zeros((3, 4)))
        np.testing.assert_array_equal(out, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity_with_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m, k, n = rng.integers(2, 6, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            c = rng.normal(size=(n, m))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, atol=1e-10)
            np.testing.assert_allclose(matmul(a, np.eye(k)), a, atol=1e-12)


class TestRelu:
    def test_definition(self):
        y, mask = relu([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(mask, [False, False, True])

    def test_all_negative(self):
        y, _ = relu([-3.0, -0.5, -1e-9])
        np.testing.assert_array_equal(y, np.zeros(3))

    def test_backward_subgradient_zero_at_zero(self):
        _, mask = relu([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_backward(np.ones(3), mask), [0.0, 0.0, 1.0])

    def test_backward_matches_one_sided_difference(self):
        # convention check away from 0 where relu is differentiable
        x = np.array([-1.0, -0.3, 0.7, 2.0])
        h = 1e-6
        y1, _ = relu(x + h)
        y0, _ = relu(x - h)
        fd = (y1 - y0) / (2 * h)
        _, mask = relu(x)
        np.testing.assert_allclose(relu_backward(np.ones(4), mask), fd, atol=1e-9)

    def test_subgradient_at_zero_is_left_sided(self):
        # derivative 0 at the kink equals the left one-sided difference
        h = 1e-6
        zero = np.array([0.0])
        left = (relu(zero)[0] - relu(zero - h)[0]) / h
        _, mask = relu(zero)
        np.testing.assert_allclose(relu_backward(np.ones(1), mask), left, atol=1e-12)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_zero_vector_guarded(self):
        np.testing.assert_array_equal(l2_normalize(np.zeros(4), eps=1e-8), np.zeros(4))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            v = rng.normal(size=8)
            c = float(rng.uniform(0.1, 100.0))
            np.testing.assert_allclose(l2_normalize(c * v), l2_normalize(v), atol=1e-12)

    def test_rows_match_vector_form(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 7))
        rows = l2_normalize_rows(x)
        for i in range(5):
            np.testing.assert_allclose(rows[i], l2_normalize(x[i]), atol=1e-14)

    def test_unit_norm_when_large_enough(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        norms = np.linalg.norm(l2_normalize_rows(x), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestMeanSquare:
    def test_hand_value(self):
        assert mean_square([1.0, 2.0, 2.0, 1.0]) == 2.5

    def test_zero(self):
        assert mean_square(np.zeros(5)) == 0.0

    def test_constant(self):
        c = 1.7
        np.testing.assert_allclose(mean_square(np.full(9, c)), c * c, atol=1e-15)

    def test_nonnegative_and_zero_iff_zero(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            v = rng.normal(size=6)
            assert mean_square(v) >= 0.0
            assert (mean_square(v) == 0.0) == bool(np.all(v == 0.0))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_square(np.array([]))

    def test_rows(self):
        x = np.array([[1.0, 2.0, 2.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(mean_square_rows(x), [2.5, 0.0], atol=1e-15)


class TestHeUniformInit:
    def test_support_bound(self):
        rng = np.random.default_rng(5)
        W = he_uniform_init(50, 40, rng)
        limit = np.sqrt(6.0 / 50)
        assert np.all(np.abs(W) <= limit)
        assert W.shape == (40, 50)

    def test_deterministic_per_seed(self):
        a = he_uniform_init(10, 10, np.random.default_rng(42))
        b = he_uniform_init(10, 10, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_sample_mean_within_three_sigma(self):
        rng = np.random.default_rng(6)
        W = he_uniform_init(100, 100, rng)
        limit = np.sqrt(6.0 / 100)
        sigma_mean = (limit / np.sqrt(3.0)) / np.sqrt(W.size)
        assert abs(W.mean()) < 3.0 * sigma_mean

    def test_rejects_nonpositive_fans(self):
        with pytest.raises(ValueError):
            he_uniform_init(0, 3, np.random.default_rng(0))


class TestFiniteDiffGrad:
    def test_square_function(self):
        grad = finite_diff_grad(lambda w: float(w[0] ** 2), np.array([3.0]), h=1e-4)
        assert abs(grad[0] - 6.0) < 1e-6

    def test_constant_function(self):
        grad = finite_diff_grad(lambda w: 4.2, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_nonfinite_propagates_diagnostic(self):
        with pytest.raises(NumericalOverflowError):
            finite_diff_grad(lambda w: float("inf"), np.array([1.0]))

    def test_dense_relu_mean_square_gradient(self):
        rng = np.random.default_rng(7)
        layer = DenseLayer.init(6, 5, rng)
        x = rng.normal(size=(3, 6))

        y, cache = layer.forward(x)
        dW, db, _ = layer.backward((2.0 / y.shape[1]) * y, cache)

        original = layer.W.copy()

        def loss_of_w(w):
            layer.W[...] = w
            try:
                out, _ = layer.forward(x)
                return float(np.sum(mean_square_rows(out)))
            finally:
                layer.W[...] = original

        fd = finite_diff_grad(loss_of_w, original, h=1e-4)
        rel = np.max(np.abs(dW - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert rel < 1e-4


class TestDenseLayer:
    def test_forward_shape_validation(self):
        layer = DenseLayer.init(4, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((2, 5)))

    def test_identity_activation_passthrough(self):
        layer = DenseLayer(np.eye(3), np.zeros(3), activation="identity")
        y, _ = layer.forward(np.array([[-1.0, 0.5, 2.0]]))
        np.testing.assert_array_equal(y, [[-1.0, 0.5, 2.0]])

    def test_inconsistent_parameters_rejected(self):
        with pytest.raises(ShapeError):
            DenseLayer(np.zeros((3, 4)), np.zeros(2))


class TestConv2D:
    def test_one_by_one_identity_kernel(self):
        layer = Conv2DLayer(np.ones((1, 1, 1, 1)), np.zeros(1), activation="identity")
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        y, _ = layer.forward(x)
        np.testing.assert_array_equal(y, x)

    def test_three_by_three_ones_kernel_hand_sums(self):
        layer = Conv2DLayer(np.ones((1, 1, 3, 3)), np.zeros(1), activation="identity")
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        y, _ = layer.forward(x)
        np.testing.assert_array_equal(y[0, 0], [[54.0, 63.0], [90.0, 99.0]])

    def test_output_dims_formula(self):
        rng = np.random.default_rng(8)
        layer = Conv2DLayer.init(1, 2, 3, 3, rng, stride=2, padding=1)
        y, _ = layer.forward(np.zeros((1, 1, 5, 5)))
        # floor((5 + 2*1 - 3)/2) + 1 = 3
        assert y.shape == (1, 2, 3, 3)

    def test_nonpositive_output_rejected(self):
        rng = np.random.default_rng(9)
        layer = Conv2DLayer.init(1, 1, 5, 5, rng)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 1, 3, 3)))

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        layer = Conv2DLayer.init(2, 1, 3, 3, rng)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 1, 6, 6)))

    def test_flat_roundtrip_inside_chain(self):
        rng = np.random.default_rng(11)
        layer = Conv2DLayer.init(1, 2, 3, 3, rng, padding=1, in_shape=(1, 5, 5))
        x = rng.uniform(size=(4, 25))
        y, cache = layer.forward(x)
        assert y.shape == (4, layer.out_width)
        dk, dbias, dx = layer.backward(np.ones_like(y), cache)
        assert dx.shape == x.shape
        assert dk.shape == layer.kernels.shape

    def test_kernel_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        layer = Conv2DLayer.init(2, 2, 3, 3, rng, stride=1, padding=1)
        x = rng.normal(size=(2, 2, 5, 5))

        y, cache = layer.forward(x)
        flat = y.reshape(2, -1)
        dy = ((2.0 / flat.shape[1]) * flat).reshape(y.shape)
        dk, dbias, _ = layer.backward(dy, cache)

        original = layer.kernels.copy()

        def loss_of_k(k):
            layer.kernels[...] = k
            try:
                out, _ = layer.forward(x)
                return float(np.sum(mean_square_rows(out.reshape(2, -1))))
            finally:
                layer.kernels[...] = original

        fd = finite_diff_grad(loss_of_k, original, h=1e-4)
        rel = np.max(np.abs(dk - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert rel < 1e-4
