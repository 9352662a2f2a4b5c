"""Reverse-mode tape: forward values and FD checks of every adjoint rule."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fracspde import sparse_core as sc
from fracspde.autodiff import Tape


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def check_grad(build, x0, rtol=1e-6, atol=1e-9, h=1e-6):
    """build(tape, x_var) -> scalar Var; AD gradient against central FD."""
    t = Tape()
    xv = t.var(np.asarray(x0, dtype=np.float64))
    root = build(t, xv)
    (g,) = t.gradient(root, [xv])

    def value(x):
        tt = Tape()
        return float(build(tt, tt.var(x)).value)

    assert_allclose(g, fd_grad(value, x0, h=h), rtol=rtol, atol=atol)
    return root.value


def test_scalar_chain():
    def f(t, x):
        a = t.exp(x[0])
        b = t.log(t.add(a, 1.5))
        c = t.div(t.mul(b, x[1]), t.sqrt(t.add(t.powi(x[1], 2), 1.0)))
        return t.sub(c, t.mul(x[0], 0.25))

    check_grad(f, np.array([0.3, -1.2]))


def test_elementwise_vector_ops():
    x0 = np.array([0.4, -0.9, 1.7, 0.05])

    def f(t, x):
        return t.sum(t.add(t.mul(t.sigmoid(x), t.cosh(x)),
                           t.add(t.sinh(x), t.sinhc(x))))

    check_grad(f, x0)


def test_gammaln_grad():
    check_grad(lambda t, x: t.sum(t.gammaln(x)), np.array([0.7, 2.3, 5.5]))


def test_operator_sugar_matches_methods():
    t = Tape()
    x = t.var(np.array([1.0, 2.0]))
    y = (-x + 2.0) * x / 4.0 - 1.0
    assert_allclose(y.value, (-np.array([1.0, 2.0]) + 2.0) * np.array([1.0, 2.0]) / 4.0 - 1.0)
    z = 1.0 / x - (2.0 - x)
    assert_allclose(z.value, 1.0 / np.array([1.0, 2.0]) - (2.0 - np.array([1.0, 2.0])))


def test_cosh_sqrt_values_and_grad():
    """cosh(sqrt(s)) as a function of s = |v|^2, smooth through s = 0."""
    s = np.array([1e-12, 1e-6, 0.1, 2.0, 9.0])
    t = Tape()
    out = t.cosh_sqrt(t.var(s))
    assert_allclose(out.value, np.cosh(np.sqrt(s)), rtol=1e-13)
    check_grad(lambda tt, x: tt.sum(tt.cosh_sqrt(x)), np.array([0.3, 1.4]), h=1e-7)
    # derivative at exactly zero: d/ds cosh(sqrt(s)) -> 1/2
    t0 = Tape()
    x0 = t0.var(np.array([0.0]))
    (g,) = t0.gradient(t0.sum(t0.cosh_sqrt(x0)), [x0])
    assert g[0] == pytest.approx(0.5, abs=1e-12)


def test_sinhc_sqrt_values_and_grad():
    s = np.array([1e-12, 1e-6, 0.1, 2.0, 9.0])
    t = Tape()
    out = t.sinhc_sqrt(t.var(s))
    assert_allclose(out.value, np.sinh(np.sqrt(s)) / np.sqrt(s), rtol=1e-13)
    check_grad(lambda tt, x: tt.sum(tt.sinhc_sqrt(x)), np.array([0.5, 3.0]), h=1e-7)
    t0 = Tape()
    x0 = t0.var(np.array([0.0]))
    assert t0.sinhc_sqrt(x0).value[0] == 1.0
    (g,) = t0.gradient(t0.sum(t0.sinhc_sqrt(x0)), [x0])
    assert g[0] == pytest.approx(1.0 / 6.0, abs=1e-12)


def test_sinhc_at_zero():
    t = Tape()
    x = t.var(np.array([0.0, 1e-9, 1.0]))
    out = t.sinhc(x)
    assert out.value[0] == 1.0
    assert_allclose(out.value[2], np.sinh(1.0), rtol=1e-15)
    (g,) = t.gradient(t.sum(out), [x])
    assert g[0] == pytest.approx(0.0, abs=1e-12)  # sinhc is even


def test_dot_and_matmul():
    rng = np.random.default_rng(5)
    A0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=4)

    t = Tape()
    A, b = t.var(A0), t.var(b0)
    root = t.dot(t.matmul(A, b), t.matmul(A, b))
    gA, gb = t.gradient(root, [A, b])

    def val(Af, bf):
        y = Af @ bf
        return float(y @ y)

    assert_allclose(gA, fd_grad(lambda x: val(x, b0), A0), rtol=1e-6)
    assert_allclose(gb, fd_grad(lambda x: val(A0, x), b0), rtol=1e-6)


def test_solve_dense_grad():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(4, 4))
    A0 = M @ M.T + 4.0 * np.eye(4)
    b0 = rng.normal(size=4)
    c = rng.normal(size=4)

    # the tape has no reshape; lift the flat matrix entries to (4, 4)
    # through tensordot_const with a one-hot basis
    basis = np.zeros((16, 4, 4))
    for k in range(16):
        basis[k, k // 4, k % 4] = 1.0

    def f(t, x):
        A = t.tensordot_const(t.getitem(x, slice(0, 16)), basis)
        b = t.getitem(x, slice(16, 20))
        return t.dot(c, t.solve_dense(A, b))

    x0 = np.concatenate([A0.ravel(), b0])
    check_grad(f, x0, rtol=5e-6)


def test_vmin_picks_argmin():
    t = Tape()
    x = t.var(np.array([3.0, 1.0, 2.0]))
    m = t.vmin(x)
    assert m.value == 1.0
    (g,) = t.gradient(m, [x])
    assert_allclose(g, [0.0, 1.0, 0.0])


def test_concat_and_getitem():
    def f(t, x):
        a = t.getitem(x, slice(0, 2))
        b = t.getitem(x, 3)
        joined = t.concat([a, t.mul(b, 2.0), t.constant(1.0)])
        return t.dot(joined, joined)

    check_grad(f, np.array([0.5, -1.0, 9.0, 2.0]))


def test_tensordot_const_grad():
    T = np.random.default_rng(2).normal(size=(3, 2, 2))

    def f(t, x):
        M = t.tensordot_const(x, T)
        return t.sum(t.mul(M, M))

    check_grad(f, np.array([0.3, -0.7, 1.1]))


def test_const_spmatvec_grad():
    import scipy.sparse as sp

    M = sp.random(5, 4, density=0.6, random_state=np.random.RandomState(8)).tocsr()

    def f(t, x):
        y = t.const_spmatvec(M, x, M.T.tocsr())
        return t.dot(y, y)

    check_grad(f, np.array([0.1, 2.0, -0.4, 0.9]))


def test_unused_input_and_stop_gradient():
    t = Tape()
    x = t.var(np.array([1.0, 2.0]))
    y = t.var(np.array([3.0]))
    root = t.sum(t.mul(x, x))
    gx, gy = t.gradient(root, [x, y])
    assert_allclose(gx, [2.0, 4.0])
    assert_allclose(gy, [0.0])

    t2 = Tape()
    x2 = t2.var(np.array([1.5]))
    root2 = t2.sum(t2.mul(t2.stop_gradient(x2), x2))
    (g2,) = t2.gradient(root2, [x2])
    assert_allclose(g2, [1.5])  # only the live factor contributes


def test_gradient_rejects_vector_root():
    t = Tape()
    x = t.var(np.array([1.0, 2.0]))
    with pytest.raises(ValueError, match="scalar"):
        t.gradient(x, [x])


# -- sparse nodes ----------------------------------------------------------


def _sym_pattern_setup():
    """A small SPD pattern plus the mirror map lower-entries -> all entries.

    FD perturbs the lower-triangle values only, so the matrix stays
    value-symmetric along the whole FD path.
    """
    rng = np.random.default_rng(17)
    n = 5
    A = np.where(rng.random((n, n)) < 0.45, rng.uniform(-1.0, 1.0, (n, n)), 0.0)
    A = 0.5 * (A + A.T)
    A[np.diag_indices(n)] = np.abs(A).sum(axis=1) + 1.5
    spd = sc.from_dense(A, symmetric=True)
    pat = spd.pattern
    rows, cols = pat.indices, pat.entry_cols
    lower = np.flatnonzero(rows >= cols)
    mirror = np.zeros((pat.nnz, len(lower)))
    for t, e in enumerate(lower):
        mirror[e, t] = 1.0
        twin = pat.find_positions(np.array([cols[e]]), np.array([rows[e]]))[0]
        mirror[twin, t] = 1.0  # twin == e on the diagonal; same cell twice
    return spd, pat, lower, mirror


def test_sp_logdet_grad_is_masked_inverse():
    spd, pat, lower, mirror = _sym_pattern_setup()
    x0 = spd.values[lower]

    def f(t, x):
        vals = t.matmul(mirror, x)
        A = t.sp_build(pat, vals, symmetric=True)
        return t.sp_logdet(A)

    lv = check_grad(f, x0, rtol=5e-7)
    assert lv == pytest.approx(np.linalg.slogdet(spd.to_dense())[1], rel=1e-12)


def test_sp_solve_grad():
    spd, pat, lower, mirror = _sym_pattern_setup()
    x0 = np.concatenate([spd.values[lower], [0.3, -1.0, 0.7, 0.2, 0.5]])
    nl = len(lower)
    c = np.arange(1.0, 6.0)

    def f(t, x):
        vals = t.matmul(mirror, t.getitem(x, slice(0, nl)))
        A = t.sp_build(pat, vals, symmetric=True)
        b = t.getitem(x, slice(nl, nl + 5))
        return t.dot(c, t.sp_solve(A, b))

    check_grad(f, x0, rtol=5e-7)


def test_sp_solve_matches_dense():
    spd, *_ = _sym_pattern_setup()
    t = Tape()
    A = t.var(spd)
    b = np.arange(1.0, 6.0)
    x = t.sp_solve(A, b)
    assert_allclose(x.value, np.linalg.solve(spd.to_dense(), b), rtol=1e-12)


def test_factor_shared_between_solve_and_logdet():
    spd, *_ = _sym_pattern_setup()
    t = Tape()
    A = t.var(spd)
    t.sp_solve(A, np.ones(5))
    t.sp_logdet(A)
    t.sp_solve(A, np.arange(5.0))
    assert len(t.factors) == 1


def test_sp_matmul_row_scale_chain_grad():
    """The Qtilde construction in miniature: P^T diag(m) P + logdet."""
    rng = np.random.default_rng(23)
    n = 4
    dense = np.eye(n) + 0.3 * np.where(rng.random((n, n)) < 0.5, rng.normal(size=(n, n)), 0.0)
    P0 = sc.from_dense(dense, keep_zeros=True)
    x0 = np.concatenate([P0.values, rng.uniform(0.5, 1.5, n)])
    ne = P0.pattern.nnz

    def f(t, x):
        P = t.sp_build(P0.pattern, t.getitem(x, slice(0, ne)))
        mid = t.exp(t.getitem(x, slice(ne, ne + n)))
        Q = t.sp_matmul(t.sp_transpose(P), t.sp_row_scale(mid, P))
        Q = t.sp_add(Q, t.constant(sc.identity(n)), 1.0, 0.5)
        return t.sp_logdet(Q)

    check_grad(f, x0, rtol=2e-6, h=1e-7)


def test_sp_scale_col_scale_diag_values_grads():
    rng = np.random.default_rng(31)
    A0 = sc.from_dense(np.eye(3) + 0.2 * rng.normal(size=(3, 3)), keep_zeros=True)
    w = rng.normal(size=3)

    def f(t, x):
        A = t.sp_build(A0.pattern, t.getitem(x, slice(0, 9)))
        s = t.getitem(x, 9)
        d = t.getitem(x, slice(10, 13))
        B = t.sp_scale(A, s)
        C = t.sp_col_scale(B, d)
        D = t.sp_add(C, t.sp_diag(d), 1.0, 2.0)
        return t.dot(w, t.sp_mat_dense(D, np.eye(3) @ w))

    x0 = np.concatenate([A0.values, [1.3], [0.4, -0.8, 1.1]])
    check_grad(f, x0)


def test_sp_hstack_block_diag_grads():
    rng = np.random.default_rng(41)
    A0 = sc.from_dense(np.eye(2) + 0.1 * rng.normal(size=(2, 2)), keep_zeros=True)
    w4 = rng.normal(size=4)
    w2 = rng.normal(size=2)

    def f(t, x):
        A = t.sp_build(A0.pattern, t.getitem(x, slice(0, 4)))
        B = t.sp_build(A0.pattern, t.getitem(x, slice(4, 8)))
        H = t.sp_hstack([A, B])
        D = t.sp_block_diag([A, B], symmetric=False)
        return t.add(t.dot(w2, t.sp_mat_dense(H, w4)),
                     t.dot(w4, t.sp_mat_dense(D, w4)))

    check_grad(f, np.concatenate([A0.values, A0.values + 0.05]))


def test_sp_values_round_trip():
    spd, *_ = _sym_pattern_setup()

    def f(t, x):
        A = t.sp_build(spd.pattern, x, symmetric=True)
        return t.sum(t.mul(t.sp_values(A), t.sp_values(A)))

    check_grad(f, spd.values.copy())
