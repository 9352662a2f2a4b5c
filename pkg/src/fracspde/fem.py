"""Finite-element assembly for the anisotropic diffusion operator.

Piecewise-linear elements with mass lumping and midpoint (centroid)
quadrature for the variable coefficients.  Because the mesh is fixed
during estimation, all geometry-dependent weights are precomputed once
into constant sparse maps; assembling for new coefficient values then
reduces to sparse-matrix-times-vector products, which is also the form
the reverse-mode tape differentiates through.

Matrices:
    C      lumped mass (diagonal)
    C_f    lumped mass weighted by f(s_T) (diagonal)
    G      anisotropic stiffness, G_ij = sum_T area_T <grad phi_i, H(s_T) grad phi_j>
    L      C_kappa2 + G, the discretized elliptic operator
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import sparse_core as sc
from .sparse_core import SparseSpd

__all__ = [
    "FemAssembly",
    "FemMatrices",
    "lumped_mass",
    "stiffness",
    "assemble_fem",
    "integer_precision",
    "symmetrize",
]


class FemAssembly:
    """Constant assembly maps for a fixed mesh.

    ``lump`` is an (n_vertices, n_triangles) map with entries area/3 so
    that the diagonal of a weighted lumped mass matrix is ``lump @ f``.
    ``w11``, ``w12``, ``w22`` are (nnz(G), n_triangles) maps so that the
    stiffness values on ``g_pattern`` are
    ``w11 @ H11 + w12 @ H12 + w22 @ H22`` evaluated at centroids.
    """

    __slots__ = (
        "mesh",
        "lump",
        "lump_t",
        "g_pattern",
        "w11",
        "w12",
        "w22",
        "w11_t",
        "w12_t",
        "w22_t",
        "diag_pos",
    )

    def __init__(self, mesh):
        self.mesh = mesh
        n = mesh.n_vertices
        m = mesh.n_triangles
        tris = mesh.triangles
        areas = mesh.areas
        grads = mesh.grads  # (m, 3, 2)

        tri_ids = np.repeat(np.arange(m, dtype=np.int64), 3)
        self.lump = sp.csr_matrix(
            (np.repeat(areas / 3.0, 3), (tris.ravel(), tri_ids)), shape=(n, m)
        )
        self.lump_t = self.lump.T.tocsr()

        # Per-triangle 3x3 blocks: rows/cols of the 9 (i, j) pairs and the
        # weights multiplying each component of H(s_T).
        loc_i, loc_j = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        rows = tris[:, loc_i.ravel()].ravel()  # (9 m,)
        cols = tris[:, loc_j.ravel()].ravel()
        gi = grads[:, loc_i.ravel(), :]  # (m, 9, 2)
        gj = grads[:, loc_j.ravel(), :]
        a9 = areas[:, None]
        w11 = (a9 * gi[:, :, 0] * gj[:, :, 0]).ravel()
        w12 = (a9 * (gi[:, :, 0] * gj[:, :, 1] + gi[:, :, 1] * gj[:, :, 0])).ravel()
        w22 = (a9 * gi[:, :, 1] * gj[:, :, 1]).ravel()

        self.g_pattern = sc.assemble_csc(rows, cols, w11, (n, n)).pattern
        pos = self.g_pattern.find_positions(rows, cols)
        tri9 = np.repeat(np.arange(m, dtype=np.int64), 9)
        shape = (self.g_pattern.nnz, m)
        self.w11 = sp.csr_matrix((w11, (pos, tri9)), shape=shape)
        self.w12 = sp.csr_matrix((w12, (pos, tri9)), shape=shape)
        self.w22 = sp.csr_matrix((w22, (pos, tri9)), shape=shape)
        self.w11_t = self.w11.T.tocsr()
        self.w12_t = self.w12.T.tocsr()
        self.w22_t = self.w22.T.tocsr()
        self.diag_pos = self.g_pattern.diag_positions
        if np.any(self.diag_pos < 0):
            raise ValueError("mesh has an isolated vertex (no triangle touches it)")

    @property
    def n(self):
        return self.mesh.n_vertices

    def mass_diag(self, f_centroids):
        return self.lump @ np.asarray(f_centroids, dtype=np.float64)

    def stiffness_values(self, h11, h12, h22):
        return self.w11 @ h11 + self.w12 @ h12 + self.w22 @ h22


def lumped_mass(assembly: FemAssembly, f_centroids=None) -> SparseSpd:
    """Diagonal lumped mass matrix, optionally weighted by f at centroids."""
    if f_centroids is None:
        f_centroids = np.ones(assembly.mesh.n_triangles)
    return sc.diag_matrix(assembly.mass_diag(f_centroids))


def stiffness(assembly: FemAssembly, h11, h12, h22) -> SparseSpd:
    """Anisotropic stiffness matrix for per-centroid H entries."""
    vals = assembly.stiffness_values(
        np.asarray(h11, dtype=np.float64),
        np.asarray(h12, dtype=np.float64),
        np.asarray(h22, dtype=np.float64),
    )
    return SparseSpd(assembly.g_pattern, vals, symmetric=True)


class FemMatrices:
    """Assembled matrices for one set of coefficient fields."""

    __slots__ = ("assembly", "c", "c_k2", "c_t2", "G", "L")

    def __init__(self, assembly, c, c_k2, c_t2, G, L):
        self.assembly = assembly
        self.c = c  # diagonal vectors
        self.c_k2 = c_k2
        self.c_t2 = c_t2
        self.G = G
        self.L = L


def assemble_fem(assembly: FemAssembly, kappa2_c, tau2_c, h11, h12, h22) -> FemMatrices:
    """Assemble C, C_kappa2, C_tau2, G and L = C_kappa2 + G.

    All coefficient arrays are per-centroid values.
    """
    c = assembly.mass_diag(np.ones(assembly.mesh.n_triangles))
    c_k2 = assembly.mass_diag(kappa2_c)
    c_t2 = assembly.mass_diag(tau2_c)
    if np.any(c_k2 <= 0.0) or np.any(c_t2 <= 0.0):
        raise ValueError("weighted mass matrix has a non-positive diagonal entry")
    g_vals = assembly.stiffness_values(h11, h12, h22)
    G = SparseSpd(assembly.g_pattern, g_vals, symmetric=True)
    l_vals = g_vals.copy()
    l_vals[assembly.diag_pos] += c_k2
    L = SparseSpd(assembly.g_pattern, l_vals, symmetric=True)
    return FemMatrices(assembly, c, c_k2, c_t2, G, L)


def symmetrize(A: SparseSpd) -> SparseSpd:
    """(A + A^T)/2 on A's (structurally symmetric) pattern."""
    _, _, pos = A.pattern.csr_view
    if A.pattern.transpose_pattern is not A.pattern:
        raise ValueError("pattern is not structurally symmetric")
    return SparseSpd(A.pattern, 0.5 * (A.values + A.values[pos]), symmetric=True)


def integer_precision(fem: FemMatrices, beta: int) -> SparseSpd:
    """Precision of the FEM weights for integer exponents.

    Q_1 = L^T C_tau2^{-1} L and Q_beta = L^T C^{-1} Q_{beta-1} C^{-1} L.
    """
    if beta < 1 or int(beta) != beta:
        raise ValueError(f"integer beta must be a positive integer, got {beta!r}")
    L = fem.L
    Q = sc.matmul(L.transpose(), sc.scale_rows(1.0 / fem.c_t2, L))
    for _ in range(int(beta) - 1):
        X = sc.scale_rows(1.0 / fem.c, L)  # C^{-1} L
        Q = sc.matmul(sc.matmul(X.transpose(), Q), X)
    return symmetrize(Q)
