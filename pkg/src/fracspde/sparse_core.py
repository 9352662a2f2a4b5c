"""Sparse symmetric matrices with explicit, interned sparsity patterns.

A `SparseSpd` is the carrier for every sparse object in the package: SPD
precision matrices, but also the non-symmetric operator polynomials and
rectangular projectors (the `symmetric` flag records which).  Patterns are
immutable and interned by content, so every derived structure — fill-reducing
ordering, symbolic factorization, product patterns, CSR views — is computed
once and reused across the thousands of numeric refactorizations an optimizer
run performs.

Factorizations use an exact minimum-degree ordering and an up-looking sparse
Cholesky; selected entries of the inverse come from the Takahashi recursions
on the factor pattern.  Dense right-hand sides and products are delegated to
numba kernels in `_sparse_kernels`.
"""

from __future__ import annotations

import heapq

import numpy as np
import scipy.sparse as sp

from . import _sparse_kernels as K


class NotSpdError(ValueError):
    """Raised when a numeric factorization hits a non-positive pivot."""


class PatternCoverageError(KeyError):
    """Raised when selected-inverse entries are requested outside the factor fill.

    Widen the matrix pattern with explicit zeros (``with_pattern``) before
    factorizing so the fill covers the requested pairs.
    """


_PATTERN_CACHE: dict = {}
_PRODUCT_CACHE: dict = {}
_UNION_CACHE: dict = {}


def clear_caches():
    _PATTERN_CACHE.clear()
    _PRODUCT_CACHE.clear()
    _UNION_CACHE.clear()


class Pattern:
    """Immutable CSC sparsity pattern (sorted row indices within each column)."""

    __slots__ = (
        "shape",
        "indptr",
        "indices",
        "nnz",
        "_cache",
    )

    def __init__(self, shape, indptr, indices):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = indptr
        self.indices = indices
        self.nnz = int(indices.size)
        self._cache = {}

    # -- derived structures, computed lazily and memoized ------------------

    def _memo(self, key, fn):
        out = self._cache.get(key)
        if out is None:
            out = fn()
            self._cache[key] = out
        return out

    @property
    def entry_cols(self):
        """Column index of every stored entry (expanded from indptr)."""
        return self._memo(
            "entry_cols",
            lambda: np.repeat(
                np.arange(self.shape[1], dtype=np.int64),
                np.diff(self.indptr),
            ),
        )

    @property
    def keys(self):
        """Global sort keys (col-major linear indices); strictly increasing."""
        return self._memo(
            "keys", lambda: self.entry_cols * self.shape[0] + self.indices
        )

    def to_scipy(self, values=None):
        if values is None:
            values = np.ones(self.nnz)
        return sp.csc_matrix((values, self.indices, self.indptr), shape=self.shape)

    @property
    def csr_view(self):
        """(indptr, indices, pos) with csr_data = csc_data[pos]."""

        def build():
            M = sp.csc_matrix(
                (np.arange(self.nnz, dtype=np.int64), self.indices, self.indptr),
                shape=self.shape,
            ).tocsr()
            M.sort_indices()
            return (
                M.indptr.astype(np.int64),
                M.indices.astype(np.int64),
                M.data.astype(np.int64),
            )

        return self._memo("csr_view", build)

    @property
    def transpose_pattern(self):
        def build():
            indptr, indices, _ = self.csr_view
            return make_pattern((self.shape[1], self.shape[0]), indptr, indices)

        return self._memo("transpose", build)

    @property
    def is_structurally_symmetric(self):
        return self.shape[0] == self.shape[1] and self.transpose_pattern is self

    @property
    def diag_positions(self):
        """Position of each diagonal entry, -1 where absent (square only)."""

        def build():
            n = min(self.shape)
            pos = np.full(n, -1, dtype=np.int64)
            for j in range(n):
                lo, hi = self.indptr[j], self.indptr[j + 1]
                k = np.searchsorted(self.indices[lo:hi], j)
                if k < hi - lo and self.indices[lo + k] == j:
                    pos[j] = lo + k
            return pos

        return self._memo("diag_pos", build)

    @property
    def min_degree_perm(self):
        return self._memo("md_perm", lambda: min_degree(self))

    def find_positions(self, rows, cols, missing_error=True):
        """Positions of (rows[t], cols[t]) entries; -1 (or raise) if absent."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        want = cols * self.shape[0] + rows
        idx = np.searchsorted(self.keys, want)
        idx_c = np.minimum(idx, self.nnz - 1)
        ok = self.keys[idx_c] == want
        if missing_error and not ok.all():
            t = int(np.flatnonzero(~ok)[0])
            raise PatternCoverageError(
                f"entry ({int(rows[t])}, {int(cols[t])}) is not in the pattern"
            )
        return np.where(ok, idx_c, -1)

    def __repr__(self):
        return f"Pattern(shape={self.shape}, nnz={self.nnz})"


def make_pattern(shape, indptr, indices) -> Pattern:
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    key = (int(shape[0]), int(shape[1]), indptr.tobytes(), indices.tobytes())
    pat = _PATTERN_CACHE.get(key)
    if pat is None:
        pat = Pattern(shape, indptr, indices)
        _PATTERN_CACHE[key] = pat
    return pat


def pattern_from_scipy(M) -> Pattern:
    M = M.tocsc()
    M.sort_indices()
    return make_pattern(M.shape, M.indptr, M.indices)


class SparseSpd:
    """Sparse matrix = interned pattern + value array.

    `symmetric=True` marks full symmetric storage (both triangles present);
    factorization requires it.  Rectangular/asymmetric operators reuse the
    same container with `symmetric=False`.
    """

    __slots__ = ("pattern", "values", "symmetric")

    def __init__(self, pattern: Pattern, values, symmetric=False):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (pattern.nnz,):
            raise ValueError(
                f"values shape {values.shape} does not match pattern nnz {pattern.nnz}"
            )
        self.pattern = pattern
        self.values = values
        self.symmetric = bool(symmetric)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def n(self):
        return self.pattern.shape[0]

    def to_scipy(self):
        return self.pattern.to_scipy(self.values)

    def to_dense(self):
        return np.asarray(self.to_scipy().todense())

    def with_values(self, values):
        return SparseSpd(self.pattern, values, self.symmetric)

    def copy(self):
        return SparseSpd(self.pattern, self.values.copy(), self.symmetric)

    def diagonal(self):
        pos = self.pattern.diag_positions
        out = np.zeros(min(self.shape))
        ok = pos >= 0
        out[ok] = self.values[pos[ok]]
        return out

    def transpose(self):
        _, _, pos = self.pattern.csr_view
        return SparseSpd(
            self.pattern.transpose_pattern, self.values[pos], self.symmetric
        )

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        one_d = x.ndim == 1
        X = np.ascontiguousarray(x.reshape(x.shape[0], -1))
        out = np.zeros((self.shape[0], X.shape[1]))
        K.csc_matvec(self.shape[0], self.pattern.indptr, self.pattern.indices,
                     self.values, X, out)
        return out[:, 0] if one_d else out

    def rmatvec(self, x):
        """A^T @ x."""
        x = np.asarray(x, dtype=np.float64)
        one_d = x.ndim == 1
        X = np.ascontiguousarray(x.reshape(x.shape[0], -1))
        out = np.zeros((self.shape[1], X.shape[1]))
        K.csc_rmatvec(self.shape[0], self.pattern.indptr, self.pattern.indices,
                      self.values, X, out)
        return out[:, 0] if one_d else out

    def __repr__(self):
        sym = ", symmetric" if self.symmetric else ""
        return f"SparseSpd(shape={self.shape}, nnz={self.pattern.nnz}{sym})"


# -- construction ----------------------------------------------------------


def assemble_csc(rows, cols, values, shape, symmetric=False) -> SparseSpd:
    """Build from triplets; duplicate entries are summed, pattern canonicalized.

    Explicit zeros are kept as structural entries.
    """
    M = sp.coo_matrix(
        (np.asarray(values, dtype=np.float64), (rows, cols)), shape=shape
    ).tocsc()
    M.sort_indices()
    return SparseSpd(make_pattern(M.shape, M.indptr, M.indices), M.data, symmetric)


def from_scipy(M, symmetric=False) -> SparseSpd:
    M = sp.csc_matrix(M).copy()
    M.sort_indices()
    return SparseSpd(
        make_pattern(M.shape, M.indptr, M.indices),
        M.data.astype(np.float64),
        symmetric,
    )


def from_dense(A, symmetric=False, keep_zeros=False) -> SparseSpd:
    A = np.asarray(A, dtype=np.float64)
    if keep_zeros:
        r, c = np.meshgrid(
            np.arange(A.shape[0]), np.arange(A.shape[1]), indexing="ij"
        )
        return assemble_csc(r.ravel(), c.ravel(), A.ravel(), A.shape, symmetric)
    return from_scipy(sp.csc_matrix(A), symmetric)


def identity(n) -> SparseSpd:
    return from_scipy(sp.identity(n, format="csc"), symmetric=True)


def diag_matrix(d) -> SparseSpd:
    d = np.asarray(d, dtype=np.float64)
    return from_scipy(sp.diags(np.ones_like(d), format="csc"), True).with_values(d)


# -- pattern algebra (cached per operand-pattern pair) ---------------------


def product_pattern(pa: Pattern, pb: Pattern) -> Pattern:
    key = (id(pa), id(pb))
    out = _PRODUCT_CACHE.get(key)
    if out is None:
        C = (pa.to_scipy().tocsr() @ pb.to_scipy().tocsr()).tocsc()
        C.sort_indices()
        out = make_pattern(C.shape, C.indptr, C.indices)
        _PRODUCT_CACHE[key] = out
    return out


def union_pattern(pa: Pattern, pb: Pattern):
    """(union, posA, posB): positions of each operand's entries in the union."""
    key = (id(pa), id(pb))
    out = _UNION_CACHE.get(key)
    if out is None:
        U = (pa.to_scipy() + pb.to_scipy()).tocsc()
        U.sort_indices()
        pu = make_pattern(U.shape, U.indptr, U.indices)
        pos_a = np.searchsorted(pu.keys, pa.keys)
        pos_b = np.searchsorted(pu.keys, pb.keys)
        out = (pu, pos_a, pos_b)
        _UNION_CACHE[key] = out
    return out


def matmul(A: SparseSpd, B: SparseSpd, out_pattern: Pattern | None = None) -> SparseSpd:
    """A @ B, either on the full structural product pattern or masked to
    `out_pattern` (the product restricted to that pattern — entries outside
    it are dropped)."""
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch {A.shape} @ {B.shape}")
    pat = out_pattern if out_pattern is not None else product_pattern(
        A.pattern, B.pattern
    )
    Ap, Aj, apos = A.pattern.csr_view
    Bp, Bj, bpos = B.pattern.csr_view
    Cp, Cj, cpos = pat.csr_view
    cx = np.zeros(pat.nnz)
    K.masked_matmat_csr(Ap, Aj, A.values[apos], Bp, Bj, B.values[bpos],
                        Cp, Cj, cx, A.shape[0])
    out = np.empty(pat.nnz)
    out[cpos] = cx
    return SparseSpd(pat, out)


def add(A: SparseSpd, B: SparseSpd, alpha=1.0, beta=1.0) -> SparseSpd:
    """alpha*A + beta*B on the union pattern."""
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} + {B.shape}")
    pu, pos_a, pos_b = union_pattern(A.pattern, B.pattern)
    vals = np.zeros(pu.nnz)
    np.add.at(vals, pos_a, alpha * A.values)
    np.add.at(vals, pos_b, beta * B.values)
    return SparseSpd(pu, vals, A.symmetric and B.symmetric)


def scale_rows(d, A: SparseSpd) -> SparseSpd:
    """diag(d) @ A."""
    return A.with_values(A.values * np.asarray(d)[A.pattern.indices])


def scale_cols(A: SparseSpd, d) -> SparseSpd:
    """A @ diag(d)."""
    return A.with_values(A.values * np.asarray(d)[A.pattern.entry_cols])


def hstack(blocks) -> SparseSpd:
    M = sp.hstack([b.to_scipy() for b in blocks], format="csc")
    M.sort_indices()
    return from_scipy(M)


def block_diag(blocks, symmetric=True) -> SparseSpd:
    M = sp.block_diag([b.to_scipy() for b in blocks], format="csc")
    M.sort_indices()
    return from_scipy(M, symmetric)


def with_pattern(A: SparseSpd, extra: Pattern) -> SparseSpd:
    """A with its pattern widened by `extra` (explicit zeros added)."""
    Z = SparseSpd(extra, np.zeros(extra.nnz), A.symmetric)
    return add(A, Z)


# -- fill-reducing ordering ------------------------------------------------


def min_degree(pattern: Pattern):
    """Exact minimum-degree ordering of a structurally symmetric pattern.

    Lazy-deletion heap over current degrees; eliminating a vertex turns its
    neighborhood into a clique in the elimination graph.  Deterministic
    (ties by vertex index).
    """
    n = pattern.shape[0]
    indptr, indices = pattern.indptr, pattern.indices
    adj = [set() for _ in range(n)]
    for j in range(n):
        for p in range(indptr[j], indptr[j + 1]):
            i = int(indices[p])
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    alive = np.ones(n, dtype=bool)
    perm = np.empty(n, dtype=np.int64)
    k = 0
    while heap:
        d, v = heapq.heappop(heap)
        if not alive[v] or d != len(adj[v]):
            continue
        perm[k] = v
        k += 1
        alive[v] = False
        nbrs = adj[v]
        for u in nbrs:
            adj[u].discard(v)
        for u in nbrs:
            au = adj[u]
            au.update(nbrs)
            au.discard(u)
        # every neighbor's degree changed (lost v, maybe gained fill):
        # push a fresh entry so the staleness check stays exact
        for u in nbrs:
            heapq.heappush(heap, (len(adj[u]), u))
        adj[v] = set()
    assert k == n
    return perm


# -- factorization ---------------------------------------------------------


def _permuted_csc(pattern: Pattern, perm):
    """Cached pattern/positions of A[perm][:, perm] for value shuffling.

    The memo key must include the permutation: the same (interned) pattern
    can be factorized under different orderings.
    """

    def build():
        n = pattern.shape[0]
        M = pattern.to_scipy()
        M.data = np.arange(pattern.nnz, dtype=np.int64).astype(np.float64)
        Mp = M[perm][:, perm].tocsc()
        Mp.sort_indices()
        pp = make_pattern(Mp.shape, Mp.indptr, Mp.indices)
        return pp, Mp.data.astype(np.int64)

    return pattern._memo(("permuted_csc", np.asarray(perm).tobytes()), build)


def _symbolic(pp: Pattern):
    return pp._memo(
        "chol_symbolic",
        lambda: K.chol_symbolic(pp.shape[0], pp.indptr, pp.indices),
    )


class CholFactor:
    """P A P^T = L L^T with the permutation and symbolic structure cached.

    Provides solves, the log-determinant, sampling transport and the
    Takahashi selected inverse on (at least) the factor fill pattern.
    """

    __slots__ = ("n", "perm", "pinv", "Lp", "Li", "Lx", "pattern", "_pp", "_zx")

    def __init__(self, n, perm, pinv, Lp, Li, Lx, pattern, pp):
        self.n = n
        self.perm = perm
        self.pinv = pinv
        self.Lp = Lp
        self.Li = Li
        self.Lx = Lx
        self.pattern = pattern
        self._pp = pp
        self._zx = None

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(self.Lx[self.Lp[:-1]])))

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        one_d = b.ndim == 1
        X = np.array(b.reshape(self.n, -1)[self.perm], order="C")
        K.lower_solve(self.n, self.Lp, self.Li, self.Lx, X)
        K.lower_solve_t(self.n, self.Lp, self.Li, self.Lx, X)
        out = X[self.pinv]
        return out[:, 0] if one_d else out

    def sqrt_solve_t(self, z):
        """x = P^T L^{-T} z, so Cov(x) = A^{-1} for z ~ N(0, I)."""
        z = np.asarray(z, dtype=np.float64)
        one_d = z.ndim == 1
        X = np.array(z.reshape(self.n, -1), order="C")
        K.lower_solve_t(self.n, self.Lp, self.Li, self.Lx, X)
        out = X[self.pinv]
        return out[:, 0] if one_d else out

    def _selected_inverse_values(self):
        if self._zx is None:
            Rp, Ri, Rpos = self._lpattern.csr_view
            self._zx = K.takahashi(self.n, self.Lp, self.Li, self.Lx, Rp, Ri, Rpos)
        return self._zx

    @property
    def _lpattern(self):
        return make_pattern((self.n, self.n), self.Lp, self.Li)

    def partial_inverse(self, pattern: Pattern | None = None) -> SparseSpd:
        """Entries of A^{-1} on `pattern` (default: A's own pattern).

        Every requested entry must lie inside the factor fill (in permuted
        coordinates); otherwise a PatternCoverageError explains how to widen.
        """
        if pattern is None:
            pattern = self.pattern
        zx = self._selected_inverse_values()
        rows = self.pinv[pattern.indices]
        cols = self.pinv[pattern.entry_cols]
        r = np.maximum(rows, cols)
        c = np.minimum(rows, cols)
        pos = np.empty(pattern.nnz, dtype=np.int64)
        K.lookup_positions(self.Lp, self.Li, r, c, pos)
        if np.any(pos < 0):
            t = int(np.flatnonzero(pos < 0)[0])
            i = int(pattern.indices[t])
            j = int(pattern.entry_cols[t])
            raise PatternCoverageError(
                f"inverse entry ({i}, {j}) lies outside the factor fill; "
                "widen the matrix pattern with explicit zeros (with_pattern) "
                "before factorizing"
            )
        return SparseSpd(pattern, zx[pos], symmetric=True)


def cholesky(A: SparseSpd, ordering="min_degree") -> CholFactor:
    if A.shape[0] != A.shape[1]:
        raise ValueError("cholesky needs a square matrix")
    if not A.pattern.is_structurally_symmetric:
        raise ValueError("cholesky needs a structurally symmetric pattern")
    n = A.shape[0]
    if ordering == "min_degree":
        perm = A.pattern.min_degree_perm
    elif ordering == "rcm":
        perm = sp.csgraph.reverse_cuthill_mckee(
            A.to_scipy().tocsr(), symmetric_mode=True
        ).astype(np.int64)
    elif ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    pp, shuffle = _permuted_csc(A.pattern, perm)
    Lp, Li, rstart, rcols, rpos = _symbolic(pp)
    Lx = np.zeros(Lp[-1])
    bad = K.chol_numeric(
        n, pp.indptr, pp.indices, A.values[shuffle], Lp, Li, rstart, rcols, rpos, Lx
    )
    if bad >= 0:
        raise NotSpdError(
            f"non-positive pivot at vertex {int(perm[bad])} "
            f"(elimination step {int(bad)})"
        )
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n, dtype=np.int64)
    return CholFactor(n, perm, pinv, Lp, Li, Lx, A.pattern, pp)


def solve_spd(A: SparseSpd, b):
    return cholesky(A).solve(b)


def log_det_spd(A: SparseSpd):
    return cholesky(A).logdet


def partial_inverse(A: SparseSpd, pattern: Pattern | None = None) -> SparseSpd:
    return cholesky(A).partial_inverse(pattern)


# -- export ----------------------------------------------------------------


def write_matrix_market(path, A: SparseSpd):
    """Coordinate MatrixMarket dump, 1-based; symmetric matrices store the
    lower triangle only."""
    rows = A.pattern.indices
    cols = A.pattern.entry_cols
    vals = A.values
    if A.symmetric:
        keep = rows >= cols
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        kind = "symmetric"
    else:
        kind = "general"
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {kind}\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {len(vals)}\n")
        for i, j, v in zip(rows, cols, vals):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")
