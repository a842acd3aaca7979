import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fighter.tensor import (
    DomainError,
    ShapeError,
    activation,
    add,
    as_matrix,
    block_diag_replicate,
    glorot,
    hadamard,
    hconcat,
    hop_concat_powers,
    matmul,
    matrix_powers,
    relu,
    relu_grad,
    row_softmax,
    take_cols,
    take_rows,
    transpose,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestPlumbing:
    def test_matmul_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        oracle = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
        np.testing.assert_allclose(matmul(a, b), oracle, atol=1e-14)

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_elementwise_shape_checks(self):
        with pytest.raises(ShapeError):
            add(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            hadamard(np.ones((1, 2)), np.ones((2, 1)))

    def test_vector_promoted_to_row(self):
        assert as_matrix([1.0, 2.0]).shape == (1, 2)

    def test_rejects_3d(self):
        with pytest.raises(ShapeError):
            as_matrix(np.ones((2, 2, 2)))

    def test_transpose_take(self):
        m = np.arange(6.0).reshape(2, 3)
        assert transpose(m).shape == (3, 2)
        np.testing.assert_array_equal(take_rows(m, [1]), [[3, 4, 5]])
        np.testing.assert_array_equal(take_cols(m, [2, 0]), [[2, 0], [5, 3]])

    def test_hconcat_row_mismatch(self):
        with pytest.raises(ShapeError):
            hconcat([np.ones((2, 1)), np.ones((3, 1))])
        with pytest.raises(ShapeError):
            hconcat([])


class TestSoftmax:
    @given(matrices())
    def test_rows_are_stochastic(self, m):
        s = row_softmax(m)
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)

    @given(matrices(), st.floats(-100, 100))
    def test_shift_invariance(self, m, c):
        np.testing.assert_allclose(row_softmax(m + c), row_softmax(m), atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        s = row_softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
        np.testing.assert_allclose(s, [[1.0, 0.0], [0.5, 0.5]])

    def test_matches_direct_formula(self):
        m = np.array([[0.0, 1.0, 2.0]])
        e = np.exp(m)
        np.testing.assert_allclose(row_softmax(m), e / e.sum(), atol=1e-15)


class TestBlockDiag:
    @given(matrices(4), st.integers(1, 4))
    def test_block_placement(self, x, kappa):
        out = block_diag_replicate(x, kappa)
        r, c = x.shape
        assert out.shape == (kappa * r, kappa * c)
        for i in range(kappa):
            for j in range(kappa):
                block = out[i * r:(i + 1) * r, j * c:(j + 1) * c]
                np.testing.assert_array_equal(block, x if i == j else np.zeros_like(x))

    def test_kappa_one_is_identity(self):
        x = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(block_diag_replicate(x, 1), x)

    @pytest.mark.parametrize("kappa", [0, -1, 1.5])
    def test_invalid_kappa(self, kappa):
        with pytest.raises(DomainError):
            block_diag_replicate(np.ones((2, 2)), kappa)


class TestPowers:
    def test_against_matrix_power(self):
        a = np.random.default_rng(1).normal(size=(4, 4))
        for i, p in enumerate(matrix_powers(a, 5)):
            np.testing.assert_allclose(p, np.linalg.matrix_power(a, i), atol=1e-10)

    def test_hop_concat_layout(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(hop_concat_powers(a, 3), [[1, 0, 0, 1, 1, 0], [0, 1, 1, 0, 0, 1]])

    def test_hop_concat_times_blockdiag_is_hop_sum(self):
        rng = np.random.default_rng(2)
        a, x = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        ws = [rng.normal(size=(3, 2)) for _ in range(3)]
        lhs = hop_concat_powers(a, 3) @ block_diag_replicate(x, 3) @ np.vstack(ws)
        rhs = sum(np.linalg.matrix_power(a, i) @ x @ ws[i] for i in range(3))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
    def test_powers_of_stochastic_stay_stochastic(self, n, kappa, seed):
        p = row_softmax(np.random.default_rng(seed).normal(size=(n, n)))
        for block in matrix_powers(p, kappa):
            assert np.all(block >= -1e-15)
            np.testing.assert_allclose(block.sum(axis=1), 1.0, atol=1e-9)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            matrix_powers(np.ones((2, 3)), 2)


class TestActivations:
    def test_relu_and_subgradient_at_zero(self):
        m = np.array([[-1.0, 0.0, 2.0]])
        np.testing.assert_array_equal(relu(m), [[0, 0, 2]])
        np.testing.assert_array_equal(relu_grad(m), [[0, 0, 1]])

    def test_identity_pair(self):
        f, g = activation("identity")
        m = np.array([[-3.0, 4.0]])
        np.testing.assert_array_equal(f(m), m)
        np.testing.assert_array_equal(g(m), [[1, 1]])

    def test_unknown_name(self):
        with pytest.raises(DomainError, match="tanhh"):
            activation("tanhh")


def test_glorot_bound_and_determinism():
    w = glorot(np.random.default_rng(3), 6, 10)
    assert w.shape == (6, 10)
    assert np.abs(w).max() <= np.sqrt(6 / 16)
    np.testing.assert_array_equal(w, glorot(np.random.default_rng(3), 6, 10))
