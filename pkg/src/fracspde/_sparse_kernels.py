"""Numba kernels for the sparse symmetric backend.

Everything here works on raw CSC/CSR triplets (indptr, indices, data) with
int64 indices and float64 data.  Symbolic structure (elimination tree, factor
pattern, per-row update schedules) is computed once per sparsity pattern and
reused across numeric factorizations, which is what makes repeated
factorizations inside an optimizer loop cheap.

The factor convention is P A P^T = L L^T with L lower triangular, stored CSC
with the diagonal entry first in every column and the remaining row indices
strictly increasing.
"""

import numpy as np
from numba import njit

NB_OPTS = dict(cache=True, fastmath=False)


@njit(**NB_OPTS)
def etree(n, Ap, Ai):
    """Elimination tree of a structurally symmetric CSC matrix (uses i < j part)."""
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


@njit(**NB_OPTS)
def _ereach(k, Ap, Ai, parent, visited, stack, out):
    """Row pattern of L row k in etree-topological order; returns length."""
    top = 0
    visited[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i >= k:
            continue
        ln = 0
        while visited[i] != k:
            stack[ln] = i
            ln += 1
            visited[i] = k
            i = parent[i]
        while ln > 0:
            ln -= 1
            out[top] = stack[ln]
            top += 1
    # out[0:top] holds the reach in reverse-topological chunks; reverse in place
    lo, hi = 0, top - 1
    while lo < hi:
        t = out[lo]
        out[lo] = out[hi]
        out[hi] = t
        lo += 1
        hi -= 1
    return top


@njit(**NB_OPTS)
def chol_symbolic(n, Ap, Ai):
    """Symbolic Cholesky of a CSC structurally symmetric matrix.

    Returns (Lp, Li, rstart, rcols, rpos) where (Lp, Li) is the factor
    pattern (diagonal first per column, then strictly increasing rows) and
    rows k of L are described by rcols[rstart[k]:rstart[k+1]] (columns j < k
    in topological order) with rpos the position of L[k, j] inside Li.
    """
    parent = etree(n, Ap, Ai)
    visited = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    reach = np.empty(n, dtype=np.int64)

    colcount = np.ones(n, dtype=np.int64)  # diagonal
    rstart = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        ln = _ereach(k, Ap, Ai, parent, visited, stack, reach)
        rstart[k + 1] = rstart[k] + ln
        for t in range(ln):
            colcount[reach[t]] += 1

    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + colcount[j]
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    rcols = np.empty(rstart[n], dtype=np.int64)
    rpos = np.empty(rstart[n], dtype=np.int64)

    fill = Lp.copy()  # next free slot per column; slot 0 is the diagonal
    for j in range(n):
        Li[fill[j]] = j
        fill[j] += 1
    visited[:] = -1
    for k in range(n):
        ln = _ereach(k, Ap, Ai, parent, visited, stack, reach)
        base = rstart[k]
        for t in range(ln):
            j = reach[t]
            pos = fill[j]
            Li[pos] = k
            fill[j] += 1
            rcols[base + t] = j
            rpos[base + t] = pos
    return Lp, Li, rstart, rcols, rpos


@njit(**NB_OPTS)
def chol_numeric(n, Ap, Ai, Ax, Lp, Li, rstart, rcols, rpos, Lx):
    """Up-looking numeric factorization into the precomputed pattern.

    Returns -1 on success, or the (permuted) index of the first non-positive
    pivot.
    """
    x = np.zeros(n)
    fill = np.empty(n, dtype=np.int64)
    for j in range(n):
        fill[j] = Lp[j] + 1
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i <= k:
                x[i] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(rstart[k], rstart[k + 1]):
            j = rcols[t]
            xj = x[j]
            x[j] = 0.0
            ljj = Lx[Lp[j]]
            lkj = xj / ljj
            for p in range(Lp[j] + 1, fill[j]):
                x[Li[p]] -= Lx[p] * lkj
            d -= lkj * lkj
            Lx[rpos[t]] = lkj
            fill[j] += 1
        if d <= 0.0:
            return k
        Lx[Lp[k]] = np.sqrt(d)
    return -1


@njit(**NB_OPTS)
def lower_solve(n, Lp, Li, Lx, B):
    """In-place solve L X = B for dense B of shape (n, m)."""
    m = B.shape[1]
    for c in range(m):
        for j in range(n):
            xj = B[j, c] / Lx[Lp[j]]
            B[j, c] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                B[Li[p], c] -= Lx[p] * xj


@njit(**NB_OPTS)
def lower_solve_t(n, Lp, Li, Lx, B):
    """In-place solve L^T X = B for dense B of shape (n, m)."""
    m = B.shape[1]
    for c in range(m):
        for j in range(n - 1, -1, -1):
            s = B[j, c]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                s -= Lx[p] * B[Li[p], c]
            B[j, c] = s / Lx[Lp[j]]


@njit(**NB_OPTS)
def takahashi(n, Lp, Li, Lx, Rp, Ri, Rpos):
    """Selected inverse on the factor pattern.

    (Rp, Ri, Rpos) is the CSR view of the factor pattern with Rpos giving the
    CSC data position of each row entry.  Returns Z aligned with (Lp, Li):
    Z[i, j] = (A^{-1})[i, j] in permuted indices, for every stored (i >= j).
    """
    Zx = np.zeros(Lp[n])
    w = np.zeros(n)
    stamp = np.full(n, -1, dtype=np.int64)
    for j in range(n - 1, -1, -1):
        dj = Lx[Lp[j]]
        # scatter S_i = sum_{k in col j} L_kj * Z[k, i] over candidate i > j;
        # `stamp` marks entries touched for this j, so no clearing pass needed
        for q in range(Lp[j] + 1, Lp[j + 1]):
            k = Li[q]
            a = Lx[q]
            for r in range(Lp[k], Lp[k + 1]):
                i = Li[r]
                if stamp[i] != j:
                    w[i] = 0.0
                    stamp[i] = j
                w[i] += a * Zx[r]
            # row k holds (k, c) with c ascending; binary-search past c <= j
            lo, hi = Rp[k], Rp[k + 1]
            while lo < hi:
                mid = (lo + hi) // 2
                if Ri[mid] <= j:
                    lo = mid + 1
                else:
                    hi = mid
            for t in range(lo, Rp[k + 1]):
                c = Ri[t]
                if c >= k:
                    break
                if stamp[c] != j:
                    w[c] = 0.0
                    stamp[c] = j
                w[c] += a * Zx[Rpos[t]]
        s = 0.0
        for q in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[q]
            Zx[q] = -w[i] / dj if stamp[i] == j else 0.0
            s += Lx[q] * Zx[q]
        Zx[Lp[j]] = 1.0 / (dj * dj) - s / dj
    return Zx


@njit(**NB_OPTS)
def masked_matmat_csr(Ap, Aj, Ax, Bp, Bj, Bx, Cp, Cj, Cx, n_rows):
    """C = (A @ B) restricted to the pattern of C; all matrices CSR."""
    ncols = 0
    for t in range(Bp[len(Bp) - 1]):
        if Bj[t] + 1 > ncols:
            ncols = Bj[t] + 1
    for t in range(Cp[len(Cp) - 1]):
        if Cj[t] + 1 > ncols:
            ncols = Cj[t] + 1
    w = np.zeros(ncols)
    for i in range(n_rows):
        for p in range(Ap[i], Ap[i + 1]):
            k = Aj[p]
            a = Ax[p]
            for q in range(Bp[k], Bp[k + 1]):
                w[Bj[q]] += a * Bx[q]
        for t in range(Cp[i], Cp[i + 1]):
            Cx[t] = w[Cj[t]]
        for p in range(Ap[i], Ap[i + 1]):
            k = Aj[p]
            for q in range(Bp[k], Bp[k + 1]):
                w[Bj[q]] = 0.0


@njit(**NB_OPTS)
def csc_matvec(n_rows, Ap, Ai, Ax, X, out):
    """out += A @ X for CSC A and dense X of shape (n_cols, m)."""
    n_cols = len(Ap) - 1
    m = X.shape[1]
    for j in range(n_cols):
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            a = Ax[p]
            for c in range(m):
                out[i, c] += a * X[j, c]


@njit(**NB_OPTS)
def csc_rmatvec(n_rows, Ap, Ai, Ax, X, out):
    """out += A^T @ X for CSC A and dense X of shape (n_rows, m)."""
    n_cols = len(Ap) - 1
    m = X.shape[1]
    for j in range(n_cols):
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            a = Ax[p]
            for c in range(m):
                out[j, c] += a * X[i, c]


@njit(**NB_OPTS)
def lookup_positions(Lp, Li, rows, cols, out):
    """Binary-search positions of (rows[t], cols[t]) in a CSC pattern; -1 if absent.

    Expects rows[t] >= cols[t] ordering to have been handled by the caller for
    symmetric lower storage.  Column entries after the leading diagonal slot
    are sorted increasing, the diagonal sits first.
    """
    for t in range(len(rows)):
        i = rows[t]
        j = cols[t]
        lo = Lp[j]
        hi = Lp[j + 1]
        if lo < hi and Li[lo] == i:
            out[t] = lo
            continue
        lo += 1  # skip diagonal slot
        pos = np.int64(-1)
        while lo < hi:
            mid = (lo + hi) // 2
            v = Li[mid]
            if v == i:
                pos = mid
                break
            elif v < i:
                lo = mid + 1
            else:
                hi = mid
        out[t] = pos
