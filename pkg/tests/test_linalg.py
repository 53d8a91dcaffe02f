import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from h2ulv.linalg import (FLOPS, LinalgError, RankDecision, SingularBlockError, gemm,
                          lu_partial, norms, qr_full, qr_pivoted, read_matrix,
                          rel_error, trsm, write_matrix)


def naive_gauss_solve(A, b):
    """Textbook Gaussian elimination with partial pivoting, pure Python loops."""
    A = [list(map(float, row)) for row in A]
    b = list(map(float, b))
    n = len(A)
    for k in range(n):
        p = max(range(k, n), key=lambda i: abs(A[i][k]))
        A[k], A[p] = A[p], A[k]
        b[k], b[p] = b[p], b[k]
        for i in range(k + 1, n):
            f = A[i][k] / A[k][k]
            for j in range(k, n):
                A[i][j] -= f * A[k][j]
            b[i] -= f * b[k]
    x = [0.0] * n
    for i in reversed(range(n)):
        s = b[i] - sum(A[i][j] * x[j] for j in range(i + 1, n))
        x[i] = s / A[i][i]
    return np.array(x)


def triple_loop(A, B):
    m, k = len(A), len(B)
    n = len(B[0])
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += A[i][t] * B[t][j]
            C[i, j] = s
    return C


def diag_dominant(rng, n):
    A = rng.standard_normal((n, n))
    return A + np.diag(np.abs(A).sum(1) + 1.0)


# --- qr_full ---------------------------------------------------------------

def test_qr_identity():
    Q, R = qr_full(np.eye(3))
    assert_allclose(np.abs(Q), np.eye(3), atol=1e-15)
    assert_allclose(np.abs(R), np.eye(3), atol=1e-15)


def test_qr_ones_column():
    Q, R = qr_full(np.ones((4, 1)))
    assert_allclose(np.abs(Q[:, 0]), 0.5, atol=1e-15)
    assert abs(abs(R[0, 0]) - 2.0) < 1e-14


@given(st.integers(2, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_qr_full_orthogonal_and_reconstructs(m, n, seed):
    A = np.random.default_rng(seed).standard_normal((m, n))
    Q, R = qr_full(A)
    assert Q.shape == (m, m)
    assert np.abs(Q.T @ Q - np.eye(m)).max() <= 1e-12
    assert np.linalg.norm(Q @ R - A) <= 1e-12 * np.linalg.norm(A)


def test_qr_random_8x3():
    A = np.random.default_rng(1).standard_normal((8, 3))
    Q, R = qr_full(A)
    assert np.linalg.norm(Q @ R - A) / np.linalg.norm(A) <= 1e-13


def test_qr_rejects_bad_input():
    with pytest.raises(LinalgError):
        qr_full(np.array([[1.0, np.nan]]))
    with pytest.raises(LinalgError):
        qr_full(np.zeros(3))


# --- qr_pivoted ------------------------------------------------------------

def test_pivoted_rank_one():
    p = qr_pivoted(np.ones((4, 4)), RankDecision(1e-12))
    assert p.rank == 1
    assert p.Qr.shape == (4, 3)


def test_pivoted_zero_matrix():
    p = qr_pivoted(np.zeros((5, 3)), RankDecision(1e-8))
    assert p.rank == 0
    assert p.Qs.shape == (5, 0)
    assert np.abs(p.Qr.T @ p.Qr - np.eye(5)).max() <= 1e-12


def test_pivoted_rank_from_chosen_svd():
    rng = np.random.default_rng(7)
    sv = np.array([1, 1e-1, 1e-2, 1e-9, 1e-10, 1e-11])
    U, _ = np.linalg.qr(rng.standard_normal((16, 6)))
    V, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    A = U @ np.diag(sv) @ V.T
    tol = 1e-6
    expected = int(np.sum(sv > tol * sv[0]))
    assert qr_pivoted(A, RankDecision(tol)).rank == expected == 3


@given(st.integers(2, 14), st.integers(1, 14), st.integers(0, 6),
       st.sampled_from([1e-4, 1e-8, 1e-12]), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_pivoted_orthogonality_and_projection(m, n, k, tol, seed):
    rng = np.random.default_rng(seed)
    k = min(k, m, n)
    A = rng.standard_normal((m, k)) @ rng.standard_normal((k, n)) if k else rng.standard_normal((m, n))
    p = qr_pivoted(A, RankDecision(tol))
    assert np.abs(p.Q.T @ p.Q - np.eye(m)).max() <= 1e-12
    res = np.linalg.norm(A - p.Qs @ (p.Qs.T @ A))
    assert res <= 10 * tol * np.linalg.norm(A) + 1e-14


def test_pivoted_cap():
    A = np.random.default_rng(3).standard_normal((10, 10))
    assert qr_pivoted(A, RankDecision(1e-12, cap=4)).rank == 4
    assert qr_pivoted(A, (1e-12, 0)).rank == 0


def test_rank_decision_validation():
    with pytest.raises(LinalgError):
        RankDecision(0.0)
    with pytest.raises(LinalgError):
        RankDecision(1e-8, cap=-1)


# --- lu_partial ------------------------------------------------------------

def test_lu_identity():
    f = lu_partial(np.eye(4))
    assert_array_equal(f.L, np.eye(4))
    assert_array_equal(f.U, np.eye(4))
    assert_array_equal(f.perm, np.arange(4))


def test_lu_diagonal():
    A = np.diag([2.0, 5.0])
    f = lu_partial(A)
    assert np.linalg.norm(A[f.perm] - f.L @ f.U) == 0.0


def test_lu_random_dominant_8x8():
    rng = np.random.default_rng(11)
    A = diag_dominant(rng, 8)
    f = lu_partial(A)
    assert np.linalg.norm(A[f.perm] - f.L @ f.U) / np.linalg.norm(A) <= 1e-13
    b = rng.standard_normal(8)
    assert_allclose(f.solve(b), naive_gauss_solve(A, b), rtol=1e-12, atol=1e-14)


@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_lu_reconstruction_property(n, seed):
    rng = np.random.default_rng(seed)
    A = diag_dominant(rng, n)
    f = lu_partial(A)
    assert np.linalg.norm(A[f.perm] - f.L @ f.U) <= 1e-12 * np.linalg.norm(A)
    assert_allclose(np.diag(f.L), 1.0)
    B = rng.standard_normal((3, n))
    assert_allclose(f.right_solve(B) @ A, B, atol=1e-10)


def test_lu_singular_names_step():
    A = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularBlockError) as ei:
        lu_partial(A)
    assert "step" in str(ei.value)


def test_lu_rejects_nonsquare():
    with pytest.raises(LinalgError):
        lu_partial(np.ones((2, 3)))


def test_lu_empty_block():
    f = lu_partial(np.zeros((0, 0)))
    assert f.solve_L(np.zeros((0, 2))).shape == (0, 2)


# --- trsm / gemm -----------------------------------------------------------

def test_trsm_identity_and_scaling():
    B = np.random.default_rng(0).standard_normal((3, 2))
    assert_array_equal(trsm(np.eye(3), B), B)
    assert_allclose(trsm(2 * np.eye(3), np.eye(3), "left", "lower"), 0.5 * np.eye(3))


def test_trsm_unit_lower_residual():
    rng = np.random.default_rng(5)
    T = np.tril(rng.standard_normal((6, 6)), -1) + np.eye(6)
    B = rng.standard_normal((6, 4))
    X = trsm(T, B, "left", "lower", unit_diag=True)
    assert np.linalg.norm(T @ X - B) <= 1e-12 * np.linalg.norm(B)


@pytest.mark.parametrize("side", ["left", "right"])
@pytest.mark.parametrize("uplo", ["lower", "upper"])
def test_trsm_sides(side, uplo):
    rng = np.random.default_rng(2)
    T = rng.standard_normal((5, 5)) + 5 * np.eye(5)
    T = np.tril(T) if uplo == "lower" else np.triu(T)
    B = rng.standard_normal((5, 5))
    X = trsm(T, B, side, uplo)
    got = T @ X if side == "left" else X @ T
    assert_allclose(got, B, atol=1e-12)


def test_trsm_errors():
    with pytest.raises(LinalgError):
        trsm(np.eye(3), np.ones((2, 2)))
    with pytest.raises(LinalgError):
        trsm(np.zeros((2, 2)), np.ones((2, 2)))


def test_gemm_trivial():
    rng = np.random.default_rng(4)
    B = rng.standard_normal((3, 3))
    C = rng.standard_normal((3, 3))
    assert_array_equal(gemm(1.0, np.eye(3), B), B)
    assert_array_equal(gemm(0.0, np.eye(3), B, beta=1.0, C=C), C)


def test_gemm_against_triple_loop():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((5, 3))
    B = rng.standard_normal((3, 7))
    assert_allclose(gemm(1.0, A, B), triple_loop(A.tolist(), B.tolist()), rtol=0, atol=1e-14)
    assert_allclose(gemm(1.0, A.T, B, transA=True), triple_loop(A.tolist(), B.tolist()), atol=1e-14)


def test_gemm_shape_mismatch():
    with pytest.raises(LinalgError):
        gemm(1.0, np.ones((2, 3)), np.ones((2, 3)))


# --- flop accounting -------------------------------------------------------

def test_gemm_flops_exact():
    FLOPS.reset()
    gemm(1.0, np.ones((5, 3)), np.ones((3, 7)))
    assert FLOPS.tally == 2 * 5 * 3 * 7


@pytest.mark.parametrize("n", [64, 128])
def test_lu_flops_cubic(n):
    FLOPS.reset()
    lu_partial(diag_dominant(np.random.default_rng(n), n))
    assert abs(FLOPS.tally - 2 * n**3 / 3) <= 0.05 * (2 * n**3 / 3)


def test_flop_increment_negative():
    with pytest.raises(ValueError):
        FLOPS.add(-1)


# --- norms / rel_error -----------------------------------------------------

def test_rel_error_trivial():
    x = np.random.default_rng(8).standard_normal(10) + 1
    assert rel_error(x, x) == 0.0
    assert abs(rel_error(1.01 * x, x) - 0.01) <= 1e-15


def test_norms_against_sum():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((4, 6))
    fro, mx = norms(A)
    s = 0.0
    m = 0.0
    for v in A.ravel():
        s += v * v
        m = max(m, abs(v))
    assert abs(fro - s ** 0.5) <= 1e-14 * fro
    assert mx == m
    B = rng.standard_normal((4, 6))
    num = sum((a - b) ** 2 for a, b in zip(A.ravel(), B.ravel())) ** 0.5
    assert abs(rel_error(A, B) - num / s_of(B)) <= 1e-14


def s_of(B):
    return sum(v * v for v in B.ravel()) ** 0.5


def test_rel_error_errors():
    with pytest.raises(LinalgError):
        rel_error(np.ones(3), np.zeros(3))
    with pytest.raises(LinalgError):
        rel_error(np.ones(3), np.ones(4))


def test_matrix_round_trip(tmp_path):
    A = np.random.default_rng(10).standard_normal((3, 5))
    write_matrix(tmp_path / "a.txt", A)
    assert_array_equal(read_matrix(tmp_path / "a.txt"), A)
