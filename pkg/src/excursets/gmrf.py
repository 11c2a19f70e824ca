"""Gaussian posterior representations and Cholesky machinery.

A :class:`GaussianPosterior` carries a mean vector and either a sparse
precision matrix (GMRF) or a dense covariance matrix. Factorizations are
always taken under an explicit :class:`Permutation`; the caller decides
the ordering because the order in which variables are integrated is part
of the excursion algorithm, not just a fill-reducing detail.

For a permuted precision ``Q_p = Q[perm][:, perm] = L L^T`` the factor
defines the backwards autoregression

    x_i | x_{i+1:n} ~ N(mu_i - (1/L_ii) sum_{j>i} L_ji (x_j - mu_j), L_ii^{-2})

which is what the sequential integrator in :mod:`excursets.gauss_prob`
walks through. Dense covariances are routed through the same factor type
via a reverse-order Cholesky of the covariance.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _sparse


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky pivot is non-positive or below 1e-300."""

    def __init__(self, pivot, node=None):
        self.pivot = int(pivot)
        self.node = None if node is None else int(node)
        msg = f"matrix is not positive definite (pivot {self.pivot}"
        if self.node is not None:
            msg += f", node {self.node}"
        super().__init__(msg + ")")


@dataclass(frozen=True)
class Permutation:
    """Bijection on ``0..n-1``.

    ``forward[k]`` is the original node placed at position ``k``;
    ``inverse[node]`` is the position of ``node``.
    """

    forward: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_order(cls, order):
        forward = np.asarray(order, dtype=np.int64)
        n = forward.size
        if not np.array_equal(np.sort(forward), np.arange(n)):
            raise ValueError("order is not a permutation of 0..n-1")
        inverse = np.empty(n, dtype=np.int64)
        inverse[forward] = np.arange(n)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n):
        return cls.from_order(np.arange(n))

    def __len__(self):
        return self.forward.size

    def restrict(self, nodes):
        """Permutation of the sub-problem on ``nodes`` that keeps the
        relative order of this permutation. Returned order indexes into
        ``nodes``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(len(self), -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        order = local[self.forward]
        return Permutation.from_order(order[order >= 0])


def _as_csc(matrix):
    Q = sp.csc_matrix(matrix, dtype=np.float64)
    Q.sum_duplicates()
    Q.sort_indices()
    return Q


def check_precision(Q):
    """Validate a sparse symmetric precision matrix and return it as CSC."""
    Q = _as_csc(Q)
    n, m = Q.shape
    if n != m or n < 1:
        raise ValueError(f"precision must be square with n >= 1, got {Q.shape}")
    if abs(Q - Q.T).max() > 1e-10 * max(abs(Q).max(), 1.0):
        raise ValueError("precision matrix is not symmetric")
    if np.any(Q.diagonal() <= 0):
        raise NotPositiveDefinite(int(np.argmin(Q.diagonal())))
    return Q


@dataclass(frozen=True)
class GaussianPosterior:
    """Mean plus either a sparse precision or a dense covariance."""

    mean: np.ndarray
    precision: sp.csc_matrix | None = None
    covariance: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        object.__setattr__(self, "mean", mean)
        if (self.precision is None) == (self.covariance is None):
            raise ValueError("give exactly one of precision or covariance")
        if self.precision is not None:
            object.__setattr__(self, "precision", check_precision(self.precision))
            n = self.precision.shape[0]
        else:
            cov = np.array(self.covariance, dtype=np.float64)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError("covariance must be a square matrix")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * max(np.abs(cov).max(), 1e-300)):
                raise ValueError("covariance matrix is not symmetric")
            cov = 0.5 * (cov + cov.T)
            object.__setattr__(self, "covariance", cov)
            n = cov.shape[0]
        if mean.size != n:
            raise ValueError(f"mean has length {mean.size}, matrix has dimension {n}")

    @property
    def n(self):
        return self.mean.size

    @property
    def is_sparse(self):
        return self.precision is not None

    def subset(self, nodes):
        """Marginal posterior of ``nodes`` (dense covariance only; precision
        marginals are handled by ordering, see :func:`cholesky`)."""
        if self.is_sparse:
            raise TypeError("subset() needs a covariance posterior")
        nodes = np.asarray(nodes, dtype=np.int64)
        return GaussianPosterior(self.mean[nodes], covariance=self.covariance[np.ix_(nodes, nodes)])

    def adjacency(self):
        """Sparsity graph as a boolean CSR matrix without the diagonal."""
        if self.is_sparse:
            G = (self.precision != 0).tocsr()
        else:
            G = sp.csr_matrix(np.ones((self.n, self.n), dtype=bool))
        G = G.tolil()
        G.setdiag(False)
        return G.tocsr()


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor ``L`` with ``L L^T = Q[perm][:, perm]``.

    ``L`` is stored CSC with the diagonal first in every column. Dense
    routes additionally keep the dense array in ``dense``.
    """

    L: sp.csc_matrix
    perm: Permutation
    fill_in: int
    dense: np.ndarray | None = None

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def diagonal(self):
        return self.L.data[self.L.indptr[:-1]]

    def bandwidth(self):
        L = self.L.tocoo()
        return int((L.row - L.col).max()) if L.nnz else 0

    def solve_lt(self, B):
        """Solve ``L^T X = B`` in permuted coordinates."""
        B = np.array(B, dtype=np.float64, order="C")
        squeeze = B.ndim == 1
        if squeeze:
            B = B[:, None]
        if self.dense is not None:
            X = sla.solve_triangular(self.dense, B, lower=True, trans="T")
        else:
            X = _sparse.solve_upper(self.L.indptr, self.L.indices, self.L.data, B)
        return X[:, 0] if squeeze else X

    def solve_l(self, B):
        """Solve ``L X = B`` in permuted coordinates."""
        B = np.array(B, dtype=np.float64, order="C")
        squeeze = B.ndim == 1
        if squeeze:
            B = B[:, None]
        if self.dense is not None:
            X = sla.solve_triangular(self.dense, B, lower=True)
        else:
            X = _sparse.solve_lower(self.L.indptr, self.L.indices, self.L.data, B)
        return X[:, 0] if squeeze else X

    def logdet(self):
        """log-determinant of the precision."""
        return 2.0 * np.sum(np.log(self.diagonal))


class SymbolicCholesky:
    """Reusable symbolic analysis for matrices sharing one sparsity pattern.

    Used where many factorizations of the same structure are needed (the
    MCMC sampler refactors ``Q(theta)`` at every step).
    """

    def __init__(self, pattern, perm):
        self.perm = perm
        P = _as_csc(pattern)[perm.forward][:, perm.forward].tocsc()
        P.sort_indices()
        self.n = P.shape[0]
        self.Ap = P.indptr.astype(np.int64)
        self.Ai = P.indices.astype(np.int64)
        self.parent = _sparse.etree(self.Ap, self.Ai, self.n)
        counts = _sparse.column_counts(self.Ap, self.Ai, self.parent, self.n)
        self.Lp = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def align(self, Q):
        """Values of ``Q`` laid out on the permuted template pattern.

        Entries of the template missing from ``Q`` are zero. The result can
        be combined linearly with other aligned arrays and passed to
        :meth:`factor_data`.
        """
        Qp = _as_csc(Q)[self.perm.forward][:, self.perm.forward].tocsc()
        Qp.sort_indices()
        T = sp.csc_matrix((np.arange(1, self.Ai.size + 1, dtype=np.float64), self.Ai, self.Ap),
                          shape=(self.n, self.n))
        slot = T.multiply(Qp != 0).tocsc()
        slot.sort_indices()
        if slot.nnz != Qp.nnz:
            raise ValueError("matrix pattern is not contained in the template")
        data = np.zeros(self.Ai.size)
        data[slot.data.astype(np.int64) - 1] = Qp.data
        return data

    def factor_data(self, data):
        """Numeric factorization from values aligned with :meth:`align`."""
        Li, Lx, status = _sparse.chol_numeric(
            self.Ap, self.Ai, self.Ap, self.Ai, np.ascontiguousarray(data, dtype=np.float64),
            self.parent, self.Lp,
        )
        if status >= 0:
            raise NotPositiveDefinite(status, self.perm.forward[status])
        L = sp.csc_matrix((Lx, Li, self.Lp.copy()), shape=(self.n, self.n))
        fill = int(self.Lp[-1] - (self.Ai.size + self.n) // 2)
        return CholeskyFactor(L, self.perm, fill)

    def factor(self, Q):
        """Numeric factorization of ``Q`` (same pattern as the template)."""
        Qp = _as_csc(Q)[self.perm.forward][:, self.perm.forward].tocsc()
        Qp.sort_indices()
        Li, Lx, status = _sparse.chol_numeric(
            self.Ap, self.Ai,
            Qp.indptr.astype(np.int64), Qp.indices.astype(np.int64), Qp.data,
            self.parent, self.Lp,
        )
        if status >= 0:
            raise NotPositiveDefinite(status, self.perm.forward[status])
        L = sp.csc_matrix((Lx, Li, self.Lp.copy()), shape=(self.n, self.n))
        fill = int(self.Lp[-1] - (self.Ai.size + self.n) // 2)
        return CholeskyFactor(L, self.perm, fill)


def _dense_reverse_factor(cov, perm):
    """Precision factor ``L = U^{-T}`` from ``cov_p = U U^T`` with ``U``
    upper triangular, so that ``L L^T = cov_p^{-1}``."""
    S = cov[np.ix_(perm.forward, perm.forward)]
    n = S.shape[0]
    flipped = S[::-1, ::-1]
    try:
        C = sla.cholesky(flipped, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        k = n - 1
        try:
            k = n - int(str(err).split("-th")[0].split()[-1])
        except (ValueError, IndexError):
            pass
        raise NotPositiveDefinite(k, perm.forward[k]) from None
    U = C[::-1, ::-1]
    if np.any(np.diag(U) <= np.sqrt(_sparse.PIVOT_FLOOR)):
        k = int(np.argmin(np.diag(U)))
        raise NotPositiveDefinite(k, perm.forward[k])
    Uinv = sla.solve_triangular(U, np.eye(n), lower=False, check_finite=False)
    L = np.ascontiguousarray(Uinv.T)
    return L


def cholesky(posterior, perm=None):
    """Factor the posterior precision under ``perm``.

    Sparse precisions use an up-looking sparse Cholesky; dense covariances
    use a reverse-order dense Cholesky so both routes give the same
    backwards conditional structure.
    """
    n = posterior.n
    perm = Permutation.identity(n) if perm is None else perm
    if len(perm) != n:
        raise ValueError("permutation length does not match posterior dimension")
    if posterior.is_sparse:
        return SymbolicCholesky(posterior.precision, perm).factor(posterior.precision)
    L = _dense_reverse_factor(posterior.covariance, perm)
    Ls = sp.csc_matrix(np.tril(L))
    Ls.sort_indices()
    fill = int(Ls.nnz - n * (n + 1) // 2)
    return CholeskyFactor(Ls, perm, fill, dense=L)


def solve(factor, b):
    """Solve ``Q x = b`` in original node order (``b`` vector or (n, m))."""
    b = np.asarray(b, dtype=np.float64)
    fwd = factor.perm.forward
    y = factor.solve_lt(factor.solve_l(b[fwd]))
    out = np.empty_like(y)
    out[fwd] = y
    return out


def conditional_coeffs(factor, i):
    """Conditional variance of ``x_i`` given ``x_{i+1:n}`` (positions in
    factor order) and regression weights on the later neighbours.

    Returns ``(variance, neighbours, weights)`` such that
    ``E[x_i | rest] = mu_i + sum(weights * (x[neighbours] - mu[neighbours]))``.
    """
    if not 0 <= i < factor.n:
        raise IndexError(f"node position {i} out of range for n={factor.n}")
    L = factor.L
    start, end = L.indptr[i], L.indptr[i + 1]
    lii = L.data[start]
    rows = L.indices[start + 1:end]
    vals = L.data[start + 1:end]
    keep = vals != 0
    return 1.0 / lii**2, rows[keep].copy(), -vals[keep] / lii


def minimum_degree(adjacency, nodes=None, priority=None):
    """Minimum-degree elimination order on the graph induced by ``nodes``.

    Exact external degrees on the elimination graph. Ties go to the
    smallest ``priority`` (default: the node index), then the smallest
    index. Returns the nodes in elimination order.
    """
    A = sp.csr_matrix(adjacency)
    if nodes is None:
        nodes = np.arange(A.shape[0])
    nodes = [int(v) for v in nodes]
    inside = set(nodes)
    nbrs = {}
    for v in nodes:
        row = A.indices[A.indptr[v]:A.indptr[v + 1]]
        nbrs[v] = {int(w) for w in row if w != v and int(w) in inside}
    prio = {v: (v if priority is None else priority[v]) for v in nodes}
    heap = [(len(nbrs[v]), prio[v], v) for v in nodes]
    heapq.heapify(heap)
    done = set()
    order = []
    while heap:
        deg, _, v = heapq.heappop(heap)
        if v in done or deg != len(nbrs[v]):
            continue
        done.add(v)
        order.append(v)
        clique = nbrs.pop(v)
        for w in clique:
            s = nbrs[w]
            s.discard(v)
            s |= clique
            s.discard(w)
            heapq.heappush(heap, (len(s), prio[w], w))
    return np.asarray(order, dtype=np.int64)


def fill_reducing_permutation(posterior):
    if not posterior.is_sparse:
        return Permutation.identity(posterior.n)
    return Permutation.from_order(minimum_degree(posterior.adjacency()))


def marginal_variances(posterior, factor=None):
    """Posterior marginal variances.

    Sparse precisions use the Takahashi recursion on a fill-reduced factor,
    dense covariances read the diagonal.
    """
    if not posterior.is_sparse:
        return np.diag(posterior.covariance).copy()
    if factor is None:
        factor = cholesky(posterior, fill_reducing_permutation(posterior))
    L = factor.L
    S = _sparse.takahashi(L.indptr.astype(np.int64), L.indices.astype(np.int64), L.data)
    var_p = S[L.indptr[:-1]]
    out = np.empty_like(var_p)
    out[factor.perm.forward] = var_p
    return out


def sample(posterior, factor, rng, size=None):
    """Exact draws ``x = mu + P L^{-T} z``.

    Returns a vector for ``size=None`` and a ``(size, n)`` array otherwise.
    """
    m = 1 if size is None else int(size)
    z = rng.standard_normal((posterior.n, m))
    xp = factor.solve_lt(z)
    x = np.empty_like(xp)
    x[factor.perm.forward] = xp
    x += posterior.mean[:, None]
    return x[:, 0] if size is None else x.T
