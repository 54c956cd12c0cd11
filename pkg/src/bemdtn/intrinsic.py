"""Reference operators: cotangent Laplace--Beltrami and the FEM Schur-complement DtN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonManifoldEdge, SingularInteriorBlock
from .mesh import TetMesh, TriangleMesh
from .operators import mass_matrix, lumped_mass


@dataclass(frozen=True)
class SurfaceLaplacian:
    L: sp.csr_matrix
    M: sp.csr_matrix


def cotan_weights(mesh: TriangleMesh) -> sp.csr_matrix:
    """Symmetric edge weights ``(cot a + cot b) / 2`` as a sparse matrix (zero diagonal)."""
    if np.any(mesh.edge_triangle_count > 2):
        raise NonManifoldEdge(f"{int(np.sum(mesh.edge_triangle_count > 2))} edge(s) shared by more than two triangles")
    P = mesh.vertices
    tri = mesh.triangles
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = tri[:, (k + 1) % 3], tri[:, (k + 2) % 3], tri[:, k]
        e1 = P[i] - P[o]
        e2 = P[j] - P[o]
        cot = np.einsum("ij,ij->i", e1, e2) / np.linalg.norm(np.cross(e1, e2), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [cot / 2, cot / 2]
    n = mesh.n_vertices
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def cotan_laplacian(mesh: TriangleMesh) -> SurfaceLaplacian:
    """Positive semidefinite cotangent Laplacian ``L = D - W`` and the surface mass."""
    W = cotan_weights(mesh)
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    return SurfaceLaplacian(L.tocsr(), mass_matrix(mesh))


def _tet_gradients(tet: TetMesh):
    P = tet.vertices[tet.tets]
    D = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]], axis=2)
    G = np.linalg.inv(D)  # rows are gradients of the barycentrics 1..3
    g0 = -G.sum(axis=1)
    return np.concatenate([g0[:, None, :], G], axis=1)


def fem_volumetric_laplacian(tet: TetMesh):
    """Linear-element stiffness and mass matrices ``(L_vol, M_vol)``."""
    tet.check_orientation()
    grads = _tet_gradients(tet)
    vol = tet.volumes
    Kloc = np.einsum("tad,tbd->tab", grads, grads) * vol[:, None, None]
    Mloc = (np.ones((4, 4)) + np.eye(4))[None] * (vol / 20.0)[:, None, None]
    rows = np.repeat(tet.tets, 4, axis=1).ravel()
    cols = np.tile(tet.tets, (1, 4)).ravel()
    n = len(tet.vertices)
    L = sp.csr_matrix((Kloc.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((Mloc.ravel(), (rows, cols)), shape=(n, n))
    return L, M


@dataclass(frozen=True)
class FemDtN:
    S: np.ndarray
    M_boundary: sp.csr_matrix
    boundary: np.ndarray
    interior: np.ndarray
    L_bb: sp.csr_matrix
    L_bi: sp.csr_matrix
    L_ii: sp.csr_matrix
    surface: TriangleMesh


def fem_dtn_schur(tet: TetMesh, mass="full") -> FemDtN:
    """Schur complement ``L_bb - L_bi L_ii^{-1} L_ib`` on the boundary vertices.

    ``mass`` picks the boundary mass for eigenproblems: the surface Galerkin
    matrix (``"full"``) or its lumped diagonal.
    """
    L, _ = fem_volumetric_laplacian(tet)
    b = tet.boundary_vertices
    i = tet.interior_vertices
    L = L.tocsr()
    L_bb = L[b][:, b]
    L_bi = L[b][:, i]
    L_ii = L[i][:, i]
    S = L_bb.toarray()
    if len(i):
        try:
            lu = spla.splu(sp.csc_matrix(L_ii))
        except RuntimeError as exc:
            raise SingularInteriorBlock(str(exc)) from None
        X = lu.solve(np.ascontiguousarray(L_bi.T.toarray()))
        if not np.all(np.isfinite(X)):
            raise SingularInteriorBlock("interior block factorization produced non-finite values")
        S = S - L_bi @ X
    S = (S + S.T) / 2
    surf = tet.boundary_surface()
    if mass == "full":
        Mb = mass_matrix(surf)
    elif mass == "lumped":
        Mb = lumped_mass(surf).tocsr()
    else:
        raise ValueError("mass must be 'full' or 'lumped'")
    return FemDtN(S, Mb, b, i, L_bb, L_bi, L_ii, surf)


def dense_pencil_eigs(A, B, k):
    """Smallest ``k`` eigenpairs of a symmetric dense/sparse pencil."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    B = B.toarray() if sp.issparse(B) else np.asarray(B)
    k = min(k, A.shape[0])
    w, U = sl.eigh((A + A.T) / 2, (B + B.T) / 2, subset_by_index=[0, k - 1])
    return w, U


def laplace_eigs(mesh: TriangleMesh, k):
    """Smallest ``k`` eigenpairs of the cotangent Laplacian against the Galerkin mass."""
    lap = cotan_laplacian(mesh)
    return dense_pencil_eigs(lap.L, lap.M, k)


def fem_steklov_eigs(fem: FemDtN, k):
    return dense_pencil_eigs(fem.S, fem.M_boundary, k)
