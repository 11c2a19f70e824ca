"""Compiled kernels for sparse lower-triangular Cholesky factors.

All routines work on raw CSC arrays (indptr, indices, data). Columns of a
factor hold their diagonal entry first and the remaining rows in
increasing order.
"""

import numpy as np
from numba import njit

PIVOT_FLOOR = 1e-300


@njit(cache=True)
def etree(Ap, Ai, n):
    """Elimination tree of a symmetric matrix given by its upper triangle."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Ap, Ai, k, parent, s, w, stamp):
    # nonzero pattern of row k of L, written to s[top:n]
    n = s.shape[0]
    top = n
    w[k] = stamp
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while w[i] != stamp:
            s[length] = i
            length += 1
            w[i] = stamp
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def column_counts(Ap, Ai, parent, n):
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w, k)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def chol_numeric(Sp, Si, Ap, Ai, Ax, parent, Lp):
    """Up-looking Cholesky. The pattern (Sp, Si) drives the symbolic row
    reach; values come from (Ap, Ai, Ax), whose pattern must be a subset.
    Returns (Li, Lx, status); status is -1 on success and the failing
    pivot index otherwise."""
    n = Lp.shape[0] - 1
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    c = Lp[:n].copy()
    x = np.zeros(n)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Sp, Si, k, parent, s, w, k)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] += Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > PIVOT_FLOOR:
            return Li, Lx, k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1


@njit(cache=True)
def solve_lower(Lp, Li, Lx, B):
    """In-place solve L X = B for a (n, m) right-hand side."""
    n = Lp.shape[0] - 1
    m = B.shape[1]
    for j in range(n):
        d = Lx[Lp[j]]
        for c in range(m):
            B[j, c] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for c in range(m):
                B[i, c] -= v * B[j, c]
    return B


@njit(cache=True)
def solve_upper(Lp, Li, Lx, B):
    """In-place solve L^T X = B for a (n, m) right-hand side."""
    n = Lp.shape[0] - 1
    m = B.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for c in range(m):
                B[j, c] -= v * B[i, c]
        d = Lx[Lp[j]]
        for c in range(m):
            B[j, c] /= d
    return B


@njit(cache=True)
def _lookup(Lp, Li, S, row, col):
    # S shares the pattern of L; (row, col) with row >= col
    lo = Lp[col]
    hi = Lp[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        r = Li[mid]
        if r == row:
            return S[mid]
        if r < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return 0.0


@njit(cache=True)
def takahashi(Lp, Li, Lx):
    """Entries of Q^{-1} on the pattern of L (partial inversion)."""
    n = Lp.shape[0] - 1
    S = np.zeros(Lx.shape[0])
    for i in range(n - 1, -1, -1):
        start = Lp[i]
        end = Lp[i + 1]
        lii = Lx[start]
        for q in range(end - 1, start, -1):
            j = Li[q]
            acc = 0.0
            for p in range(start + 1, end):
                k = Li[p]
                if k >= j:
                    acc += Lx[p] * _lookup(Lp, Li, S, k, j)
                else:
                    acc += Lx[p] * _lookup(Lp, Li, S, j, k)
            S[q] = -acc / lii
        acc = 0.0
        for p in range(start + 1, end):
            acc += Lx[p] * S[p]
        S[start] = 1.0 / (lii * lii) - acc / lii
    return S
