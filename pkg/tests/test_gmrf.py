import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import lattice_precision, random_spd
from excursets import gmrf


def _sparse_post(m=6):
    Q = lattice_precision(m)
    return gmrf.GaussianPosterior(np.zeros(m * m), precision=Q), Q


def test_sparse_factor_reconstructs_permuted_precision():
    post, Q = _sparse_post()
    f = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    P = f.perm.forward
    L = f.L.toarray()
    np.testing.assert_allclose(L @ L.T, Q.toarray()[np.ix_(P, P)], atol=1e-10)


def test_dense_factor_is_a_precision_factor(rng):
    C = random_spd(rng, 7)
    post = gmrf.GaussianPosterior(np.zeros(7), covariance=C)
    f = gmrf.cholesky(post)
    P = f.perm.forward
    L = f.L if f.dense is None else f.dense
    L = L.toarray() if sp.issparse(L) else L
    np.testing.assert_allclose(L @ L.T, np.linalg.inv(C)[np.ix_(P, P)], rtol=1e-8, atol=1e-8)


def test_logdet_matches_numpy(rng):
    post, Q = _sparse_post(5)
    f = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    assert f.logdet() == pytest.approx(np.linalg.slogdet(Q.toarray())[1], rel=1e-12)


@given(st.integers(2, 9), st.integers(0, 10_000))
def test_marginal_variances_match_inverse(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n)
    A[np.abs(A) < 0.3] = 0.0  # sparsify; keep SPD by boosting the diagonal
    A += np.eye(n) * (np.abs(np.linalg.eigvalsh(A)).max() + 1.0)
    post = gmrf.GaussianPosterior(np.zeros(n), precision=sp.csc_matrix(A))
    np.testing.assert_allclose(gmrf.marginal_variances(post), np.diag(np.linalg.inv(A)), rtol=1e-9)


@given(st.permutations(list(range(8))))
def test_permutation_roundtrip(order):
    p = gmrf.Permutation.from_order(order)
    x = np.arange(8.0) * 3
    np.testing.assert_array_equal(x[p.forward][p.inverse], x)


def test_permutation_rejects_non_permutation():
    with pytest.raises(ValueError):
        gmrf.Permutation.from_order([0, 0, 1])


def test_minimum_degree_tridiagonal_has_no_fill():
    n = 30
    T = sp.diags([-np.ones(n - 1), 3 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsc()
    post = gmrf.GaussianPosterior(np.zeros(n), precision=T)
    f = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    assert f.fill_in == 0


def test_fill_reducing_beats_natural_order_on_lattice():
    post, _ = _sparse_post(12)
    natural = gmrf.cholesky(post, gmrf.Permutation.identity(post.n))
    reduced = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    assert reduced.L.nnz < natural.L.nnz


def test_indefinite_precision_raises():
    Q = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    post = gmrf.GaussianPosterior(np.zeros(2), precision=Q)
    with pytest.raises(gmrf.NotPositiveDefinite):
        gmrf.cholesky(post)


def test_posterior_requires_exactly_one_matrix():
    with pytest.raises(ValueError):
        gmrf.GaussianPosterior(np.zeros(2))
    with pytest.raises(ValueError):
        gmrf.GaussianPosterior(np.zeros(2), precision=np.eye(2), covariance=np.eye(2))


def test_solve_matches_dense(rng):
    post, Q = _sparse_post(5)
    f = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    b = rng.standard_normal(post.n)
    np.testing.assert_allclose(gmrf.solve(f, b), np.linalg.solve(Q.toarray(), b), atol=1e-10)


def test_symbolic_refactor_with_aligned_values():
    post, Q = _sparse_post(5)
    sym = gmrf.SymbolicCholesky(Q, gmrf.fill_reducing_permutation(post))
    D = sp.diags(np.linspace(0.0, 1.0, post.n))
    f = sym.factor_data(2.0 * sym.align(Q) + sym.align(D))
    direct = gmrf.cholesky(gmrf.GaussianPosterior(np.zeros(post.n), precision=(2 * Q + D).tocsc()), sym.perm)
    np.testing.assert_allclose(f.L.toarray(), direct.L.toarray(), atol=1e-12)


def test_align_rejects_foreign_pattern():
    post, Q = _sparse_post(4)
    sym = gmrf.SymbolicCholesky(Q, gmrf.fill_reducing_permutation(post))
    far = sp.csc_matrix(([1.0, 1.0], ([0, post.n - 1], [post.n - 1, 0])), shape=Q.shape)
    with pytest.raises(ValueError):
        sym.align(far)


def test_sample_moments(rng):
    C = np.array([[1.0, 0.6, 0.2], [0.6, 2.0, -0.3], [0.2, -0.3, 0.5]])
    post = gmrf.GaussianPosterior(np.array([1.0, -1.0, 0.0]), covariance=C)
    X = gmrf.sample(post, gmrf.cholesky(post), rng, size=200_000)
    np.testing.assert_allclose(X.mean(0), post.mean, atol=0.01)
    np.testing.assert_allclose(np.cov(X.T), C, atol=0.02)


def test_conditional_coeffs_give_conditional_variance(rng):
    C = random_spd(rng, 5)
    post = gmrf.GaussianPosterior(np.zeros(5), covariance=C)
    f = gmrf.cholesky(post)
    # last factor position: its conditional given later positions is the marginal
    var, rows, _ = gmrf.conditional_coeffs(f, f.n - 1)
    assert rows.size == 0
    assert var == pytest.approx(C[f.perm.forward[-1], f.perm.forward[-1]], rel=1e-10)


def test_subset_of_dense_posterior(rng):
    C = random_spd(rng, 6)
    post = gmrf.GaussianPosterior(np.arange(6.0), covariance=C)
    sub = post.subset([4, 1])
    np.testing.assert_allclose(sub.covariance, C[np.ix_([4, 1], [4, 1])])
    np.testing.assert_allclose(sub.mean, [4.0, 1.0])
