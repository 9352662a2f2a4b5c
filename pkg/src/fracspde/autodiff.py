"""Reverse-mode differentiation at matrix granularity.

The tape records whole linear-algebra steps (sparse products, SPD solves,
log-determinants) rather than scalar arithmetic.  Adjoints of sparse
matrices are kept on the sparsity pattern of the primal matrix: the
vector-Jacobian products of `sp_matmul`, `sp_solve` and `sp_logdet` only ever
evaluate the entries of the dense adjoint expression that fall inside the
primal pattern, using masked sparse products and the Takahashi selected
inverse.  That keeps a full gradient sweep at the same complexity as the
forward pass.

Values on the tape are python floats, numpy arrays, or `SparseSpd` matrices;
adjoints mirror them (a sparse node's adjoint is its value array).  Node
order is the topological order, so the reverse sweep is a single backwards
loop.  SPD factorizations triggered by solves/log-determinants are cached per
node and shared between the forward pass and every adjoint that needs them.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from . import sparse_core as sc
from .sparse_core import SparseSpd


def _unbroadcast(g, shape):
    if shape == ():
        return float(np.sum(g))
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(v):
    return () if np.isscalar(v) else np.shape(v)


class _Node:
    __slots__ = ("value", "vjp")

    def __init__(self, value, vjp=None):
        self.value = value
        self.vjp = vjp  # callable(gbar) -> [(node_index, contribution), ...]


class Var:
    """Handle to a tape node; supports arithmetic with Vars and constants."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return _shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __pow__(self, k):
        return self.tape.powi(self, k)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.factors: dict[int, sc.CholFactor] = {}

    # -- node plumbing -----------------------------------------------------

    def _push(self, value, vjp=None) -> Var:
        self.nodes.append(_Node(value, vjp))
        return Var(self, len(self.nodes) - 1)

    def var(self, value) -> Var:
        """Differentiable input."""
        if isinstance(value, (int, float)):
            value = float(value)
        elif not isinstance(value, SparseSpd):
            value = np.asarray(value, dtype=np.float64)
        return self._push(value)

    def constant(self, value) -> Var:
        return self.var(value)

    def _val(self, x):
        return x.value if isinstance(x, Var) else x

    def _idx(self, x):
        return x.idx if isinstance(x, Var) else None

    def stop_gradient(self, x) -> Var:
        return self._push(self._val(x))

    # -- elementwise / scalar ops -----------------------------------------

    def _binary(self, a, b, fwd, vjp_a, vjp_b):
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = fwd(va, vb)
        sa, sb = _shape(va), _shape(vb)

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, _unbroadcast(vjp_a(g, va, vb), sa)))
            if ib is not None:
                contribs.append((ib, _unbroadcast(vjp_b(g, va, vb), sb)))
            return contribs

        return self._push(out, vjp)

    def add(self, a, b):
        return self._binary(a, b, lambda x, y: x + y,
                            lambda g, x, y: g, lambda g, x, y: g)

    def sub(self, a, b):
        return self._binary(a, b, lambda x, y: x - y,
                            lambda g, x, y: g, lambda g, x, y: -np.asarray(g) if np.ndim(g) else -g)

    def mul(self, a, b):
        return self._binary(a, b, lambda x, y: x * y,
                            lambda g, x, y: g * y, lambda g, x, y: g * x)

    def div(self, a, b):
        return self._binary(a, b, lambda x, y: x / y,
                            lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))

    def _unary(self, a, fwd, dfn):
        va = self._val(a)
        ia = self._idx(a)
        out = fwd(va)
        sa = _shape(va)

        def vjp(g):
            return [(ia, _unbroadcast(g * dfn(va, out), sa))]

        return self._push(out, vjp if ia is not None else None)

    def powi(self, a, k):
        k = float(k)
        return self._unary(a, lambda x: x ** k, lambda x, y: k * x ** (k - 1.0))

    def exp(self, a):
        return self._unary(a, np.exp, lambda x, y: y)

    def log(self, a):
        return self._unary(a, np.log, lambda x, y: 1.0 / x)

    def sqrt(self, a):
        return self._unary(a, np.sqrt, lambda x, y: 0.5 / y)

    def cosh(self, a):
        return self._unary(a, np.cosh, lambda x, y: np.sinh(x))

    def sinh(self, a):
        return self._unary(a, np.sinh, lambda x, y: np.cosh(x))

    def sinhc(self, a):
        """sinh(x)/x with the series branch below 1e-4 (finite at 0)."""

        def f(x):
            x = np.asarray(x, dtype=np.float64)
            small = np.abs(x) < 1e-4
            xs = np.where(small, 1.0, x)
            out = np.where(small, 1.0 + x * x / 6.0, np.sinh(xs) / xs)
            return out if out.ndim else float(out)

        def d(x, y):
            x = np.asarray(x, dtype=np.float64)
            small = np.abs(x) < 1e-4
            xs = np.where(small, 1.0, x)
            out = np.where(small, x / 3.0,
                           (np.cosh(xs) - np.sinh(xs) / xs) / xs)
            return out if out.ndim else float(out)

        return self._unary(a, f, d)

    def cosh_sqrt(self, a):
        """cosh(sqrt(s)); even in sqrt(s), so smooth (and finite) at s = 0."""

        def d(s, y):
            r = np.sqrt(np.asarray(s, dtype=np.float64))
            small = r < 1e-4
            rs = np.where(small, 1.0, r)
            out = np.where(small, 0.5 + s / 12.0, np.sinh(rs) / rs / 2.0)
            return out if out.ndim else float(out)

        return self._unary(a, lambda s: np.cosh(np.sqrt(s)), d)

    def sinhc_sqrt(self, a):
        """sinh(sqrt(s))/sqrt(s); smooth at s = 0 with value 1."""

        def f(s):
            s = np.asarray(s, dtype=np.float64)
            r = np.sqrt(s)
            small = r < 1e-4
            rs = np.where(small, 1.0, r)
            out = np.where(small, 1.0 + s / 6.0, np.sinh(rs) / rs)
            return out if out.ndim else float(out)

        def d(s, y):
            s = np.asarray(s, dtype=np.float64)
            r = np.sqrt(s)
            small = r < 1e-2
            ss = np.where(small, 1.0, s)
            rs = np.sqrt(ss)
            out = np.where(
                small,
                1.0 / 6.0 + s / 60.0 + s * s / 1680.0,
                (np.cosh(rs) - np.sinh(rs) / rs) / (2.0 * ss),
            )
            return out if out.ndim else float(out)

        return self._unary(a, f, d)

    def sigmoid(self, a):
        return self._unary(
            a,
            lambda x: 1.0 / (1.0 + np.exp(-x)),
            lambda x, y: y * (1.0 - y),
        )

    def gammaln(self, a):
        return self._unary(
            a,
            lambda x: float(special.gammaln(x)) if np.isscalar(x) else special.gammaln(x),
            lambda x, y: special.digamma(x),
        )

    # -- reductions / dense linear algebra ---------------------------------

    def sum(self, a):
        va = self._val(a)
        ia = self._idx(a)
        return self._push(
            float(np.sum(va)),
            (lambda g: [(ia, g * np.ones_like(va))]) if ia is not None else None,
        )

    def dot(self, a, b):
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = float(np.dot(va, vb))

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, g * vb))
            if ib is not None:
                contribs.append((ib, g * va))
            return contribs

        return self._push(out, vjp)

    def vmin(self, a):
        """Minimum of a vector; gradient flows to the argmin entry."""
        va = self._val(a)
        ia = self._idx(a)
        k = int(np.argmin(va))

        def vjp(g):
            seed = np.zeros_like(va)
            seed[k] = g
            return [(ia, seed)]

        return self._push(float(va[k]), vjp if ia is not None else None)

    def matmul(self, a, b):
        """Dense matmul: (n,m) @ (m,) or (n,m) @ (m,k)."""
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = va @ vb

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            contribs = []
            if ia is not None:
                contribs.append((ia, np.outer(g, vb) if vb.ndim == 1 else g @ vb.T))
            if ib is not None:
                contribs.append((ib, va.T @ g))
            return contribs

        return self._push(out, vjp)

    def solve_dense(self, a, b):
        """x = A^{-1} b for small dense A."""
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        x = np.linalg.solve(va, vb)

        def vjp(g):
            gb = np.linalg.solve(va.T, np.asarray(g, dtype=np.float64))
            contribs = []
            if ia is not None:
                ga = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
                contribs.append((ia, ga))
            if ib is not None:
                contribs.append((ib, gb))
            return contribs

        return self._push(x, vjp)

    def tensordot_const(self, c, T):
        """sum_k c_k T[k] for a fixed stack of matrices T (len(c), p, q)."""
        vc = self._val(c)
        ic = self._idx(c)
        T = np.asarray(T, dtype=np.float64)
        out = np.tensordot(vc, T, axes=([0], [0]))

        def vjp(g):
            return [(ic, np.tensordot(T, np.asarray(g), axes=([1, 2], [0, 1])))]

        return self._push(out, vjp if ic is not None else None)

    def const_spmatvec(self, M, x, Mt=None):
        """Fixed scipy sparse matrix times a differentiable dense vector.

        ``Mt`` lets callers supply a pre-transposed copy when the same
        matrix is applied on every evaluation.
        """
        vx = self._val(x)
        ix = self._idx(x)
        if Mt is None:
            Mt = M.T.tocsr()

        def vjp(g):
            return [(ix, Mt @ np.asarray(g, dtype=np.float64))]

        return self._push(M @ vx, vjp if ix is not None else None)

    def concat(self, parts):
        vals = [self._val(p) for p in parts]
        idxs = [self._idx(p) for p in parts]
        sizes = [np.size(v) for v in vals]
        out = np.concatenate([np.atleast_1d(np.asarray(v, dtype=np.float64))
                              for v in vals])
        offs = np.cumsum([0] + sizes)

        def vjp(g):
            g = np.asarray(g)
            contribs = []
            for t, i in enumerate(idxs):
                if i is None:
                    continue
                piece = g[offs[t]:offs[t + 1]]
                if np.isscalar(vals[t]):
                    piece = float(piece[0])
                contribs.append((i, piece))
            return contribs

        return self._push(out, vjp)

    def getitem(self, a, key):
        va = self._val(a)
        ia = self._idx(a)
        out = va[key]
        if isinstance(out, np.ndarray) and out.ndim == 0:
            out = float(out)

        def vjp(g):
            seed = np.zeros_like(va)
            seed[key] = g
            return [(ia, seed)]

        return self._push(out, vjp if ia is not None else None)

    # -- sparse ops --------------------------------------------------------

    def sp_build(self, pattern, values, symmetric=False):
        """SparseSpd from a pattern and a (differentiable) value vector."""
        vv = self._val(values)
        iv = self._idx(values)
        out = SparseSpd(pattern, vv, symmetric)

        def vjp(g):
            return [(iv, g.copy())]

        return self._push(out, vjp if iv is not None else None)

    def sp_values(self, a):
        va: SparseSpd = self._val(a)
        ia = self._idx(a)

        def vjp(g):
            return [(ia, np.asarray(g, dtype=np.float64))]

        return self._push(va.values.copy(), vjp if ia is not None else None)

    def sp_diag(self, d):
        """Diagonal sparse matrix from a value vector."""
        vd = self._val(d)
        idd = self._idx(d)
        out = sc.diag_matrix(vd)

        def vjp(g):
            return [(idd, g.copy())]

        return self._push(out, vjp if idd is not None else None)

    def sp_add(self, a, b, alpha=1.0, beta=1.0):
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = sc.add(va, vb, alpha, beta)
        pu, pos_a, pos_b = sc.union_pattern(va.pattern, vb.pattern)

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, alpha * g[pos_a]))
            if ib is not None:
                contribs.append((ib, beta * g[pos_b]))
            return contribs

        return self._push(out, vjp)

    def sp_scale(self, a, s):
        """Scalar times sparse matrix."""
        va, vs = self._val(a), self._val(s)
        ia, i_s = self._idx(a), self._idx(s)
        out = va.with_values(va.values * vs)

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, vs * g))
            if i_s is not None:
                contribs.append((i_s, float(np.dot(g, va.values))))
            return contribs

        return self._push(out, vjp)

    def sp_row_scale(self, d, a):
        """diag(d) @ A."""
        vd, va = self._val(d), self._val(a)
        idd, ia = self._idx(d), self._idx(a)
        out = sc.scale_rows(vd, va)
        rows = va.pattern.indices

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, g * vd[rows]))
            if idd is not None:
                gd = np.zeros_like(vd)
                np.add.at(gd, rows, g * va.values)
                contribs.append((idd, gd))
            return contribs

        return self._push(out, vjp)

    def sp_col_scale(self, a, d):
        """A @ diag(d)."""
        va, vd = self._val(a), self._val(d)
        ia, idd = self._idx(a), self._idx(d)
        out = sc.scale_cols(va, vd)
        cols = va.pattern.entry_cols

        def vjp(g):
            contribs = []
            if ia is not None:
                contribs.append((ia, g * vd[cols]))
            if idd is not None:
                gd = np.zeros_like(vd)
                np.add.at(gd, cols, g * va.values)
                contribs.append((idd, gd))
            return contribs

        return self._push(out, vjp)

    def sp_transpose(self, a):
        va: SparseSpd = self._val(a)
        ia = self._idx(a)
        out = va.transpose()
        _, _, pos = va.pattern.csr_view  # out.values = va.values[pos]

        def vjp(g):
            back = np.empty_like(g)
            back[pos] = g
            return [(ia, back)]

        return self._push(out, vjp if ia is not None else None)

    def sp_matmul(self, a, b):
        """Sparse @ sparse on the structural product pattern.

        Adjoints are evaluated only on the operand patterns:
        Abar = (Cbar B^T) masked to pattern(A), Bbar = (A^T Cbar) masked to
        pattern(B).
        """
        va, vb = self._val(a), self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        out = sc.matmul(va, vb)

        def vjp(g):
            gmat = SparseSpd(out.pattern, g)
            contribs = []
            if ia is not None:
                ga = sc.matmul(gmat, vb.transpose(), out_pattern=va.pattern)
                contribs.append((ia, ga.values))
            if ib is not None:
                gb = sc.matmul(va.transpose(), gmat, out_pattern=vb.pattern)
                contribs.append((ib, gb.values))
            return contribs

        return self._push(out, vjp)

    def sp_mat_dense(self, a, x):
        """Sparse @ dense vector/matrix."""
        va, vx = self._val(a), self._val(x)
        ia, ix = self._idx(a), self._idx(x)
        out = va.matvec(vx)
        rows = va.pattern.indices
        cols = va.pattern.entry_cols

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            contribs = []
            if ia is not None:
                if vx.ndim == 1:
                    ga = g[rows] * vx[cols]
                else:
                    ga = np.einsum("tc,tc->t", g[rows], vx[cols])
                contribs.append((ia, ga))
            if ix is not None:
                contribs.append((ix, va.rmatvec(g)))
            return contribs

        return self._push(out, vjp)

    def sp_hstack(self, parts):
        vals = [self._val(p) for p in parts]
        idxs = [self._idx(p) for p in parts]
        out = sc.hstack(vals)
        sizes = [v.pattern.nnz for v in vals]
        offs = np.cumsum([0] + sizes)

        def vjp(g):
            return [
                (i, g[offs[t]:offs[t + 1]].copy())
                for t, i in enumerate(idxs)
                if i is not None
            ]

        return self._push(out, vjp)

    def sp_block_diag(self, parts, symmetric=True):
        vals = [self._val(p) for p in parts]
        idxs = [self._idx(p) for p in parts]
        out = sc.block_diag(vals, symmetric)
        sizes = [v.pattern.nnz for v in vals]
        offs = np.cumsum([0] + sizes)

        def vjp(g):
            return [
                (i, g[offs[t]:offs[t + 1]].copy())
                for t, i in enumerate(idxs)
                if i is not None
            ]

        return self._push(out, vjp)

    def _factor(self, a: Var) -> sc.CholFactor:
        f = self.factors.get(a.idx)
        if f is None:
            f = sc.cholesky(self._val(a))
            self.factors[a.idx] = f
        return f

    def sp_solve(self, a, b):
        """x = A^{-1} b for SPD sparse A and dense b; factor cached per node.

        Abar = -(A^{-1} xbar) x^T evaluated on pattern(A) only.
        """
        va = self._val(a)
        vb = self._val(b)
        ia, ib = self._idx(a), self._idx(b)
        fac = self._factor(a) if ia is not None else sc.cholesky(va)
        x = fac.solve(vb)
        rows = va.pattern.indices
        cols = va.pattern.entry_cols

        def vjp(g):
            gb = fac.solve(np.asarray(g, dtype=np.float64))
            contribs = []
            if ia is not None:
                if x.ndim == 1:
                    ga = -gb[rows] * x[cols]
                else:
                    ga = -np.einsum("tc,tc->t", gb[rows], x[cols])
                contribs.append((ia, ga))
            if ib is not None:
                contribs.append((ib, gb))
            return contribs

        return self._push(x, vjp)

    def sp_logdet(self, a):
        """log det of SPD sparse A; adjoint is the Takahashi selected inverse
        on pattern(A)."""
        va = self._val(a)
        ia = self._idx(a)
        fac = self._factor(a) if ia is not None else sc.cholesky(va)
        out = fac.logdet

        def vjp(g):
            pinvA = fac.partial_inverse(va.pattern)
            return [(ia, g * pinvA.values)]

        return self._push(out, vjp if ia is not None else None)

    # -- reverse sweep -----------------------------------------------------

    def gradient(self, root: Var, wrt: list[Var]):
        """Adjoints of a scalar root with respect to the given inputs."""
        if not np.isscalar(root.value):
            raise ValueError("gradient root must be a scalar node")
        grads: dict[int, object] = {root.idx: 1.0}
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                continue
            for pidx, contrib in node.vjp(g):
                acc = grads.get(pidx)
                if acc is None:
                    grads[pidx] = contrib
                else:
                    grads[pidx] = acc + contrib
        out = []
        for w in wrt:
            g = grads.get(w.idx)
            if g is None:
                v = w.value
                g = 0.0 if np.isscalar(v) else np.zeros_like(
                    v.values if isinstance(v, SparseSpd) else v
                )
            out.append(g)
        return out
