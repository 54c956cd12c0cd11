"""Weak-form Dirichlet-to-Neumann operator, its saddle-point form and Steklov eigenpairs.

The symmetric weak form is ``S = H + Q^T V^{-1} Q`` with ``Q = M/2 + K``; it is
applied matrix-free through preconditioned inner solves with ``V``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _assembly
from .errors import InnerSolveDiverged, NoConvergence, NotConverged, RankDeficient
from .mesh import TriangleMesh
from .operators import AssemblyConfig, OperatorSet, assemble
from .quadrature import triangle_rule
from .solvers import Operator, SolveReport, extremal_spd_pencil, lobpcg, pcg


def component_indicators(mesh: TriangleMesh, closed_only=False):
    """Columns ``1_c`` for each connected component (optionally only closed ones)."""
    comps = mesh.closed_components() if closed_only else range(mesh.n_components)
    labels = mesh.components
    cols = [(labels == c).astype(float) for c in comps]
    return np.array(cols).T.reshape(mesh.n_vertices, len(cols))


class Preconditioners:
    """Actions of ``P_V^{-1}``, ``P_S^{-1}`` and the block preconditioner ``P_A^{(2)}``.

    ``P_V^{-1} = 4 M^{-1} H M^{-1} + sum_c beta_c 1_c 1_c^T`` with
    ``beta_c = (1_c^T M 1_c)^{-3/2}`` per connected component, and
    ``P_S^{-1} = M^{-1} V M^{-1}``. ``mass`` selects whether ``M^{-1}`` is the
    inverse of the consistent mass matrix (sparse factorization) or of the
    lumped diagonal.
    """

    def __init__(self, ops: OperatorSet, indicators, mass="consistent"):
        if mass not in ("consistent", "lumped"):
            raise ValueError("mass must be 'consistent' or 'lumped'")
        self.ops = ops
        self.mass = mass
        n = ops.n
        if mass == "lumped":
            d = ops.M_lumped.diagonal()
            self._minv = lambda x: x / (d if x.ndim == 1 else d[:, None])
        else:
            lu = spla.splu(sp.csc_matrix(ops.M))
            self._minv = lu.solve
        self.indicators = np.asarray(indicators, dtype=float).reshape(n, -1)
        Mi = ops.M @ self.indicators
        self.betas = np.einsum("ij,ij->j", self.indicators, Mi) ** -1.5
        self.PV_inv = Operator(n, self._pv, True, "P_V^-1")
        self.PS_inv = Operator(n, self._ps, True, "P_S^-1")

    def minv(self, x):
        return self._minv(np.asarray(x, dtype=float))

    def _pv(self, x):
        y = 4.0 * self.minv(self.ops.H @ self.minv(x))
        c = self.indicators.T @ x
        if x.ndim == 1:
            return y + self.indicators @ (self.betas * c)
        return y + self.indicators @ (self.betas[:, None] * c)

    def _ps(self, x):
        return self.minv(self.ops.V @ self.minv(x))

    def pa2_inv(self, alpha):
        n = self.ops.n

        def act(z):
            t, u = z[:n], z[n:]
            return np.concatenate([(alpha - 1.0) * self._pv(t), self._ps(u)])

        return Operator(2 * n, act, True, "P_A2^-1")


class DtNOperator:
    """Matrix-free handle applying the symmetric weak-form Steklov operator.

    Parameters
    ----------
    ops : OperatorSet
    mesh : TriangleMesh
        Needed for component structure (constant modes, preconditioner).
    inner_tol : float
        Relative residual for the inner ``V w = Q u`` solves.
    inner_max_iter : int
    mass : {"consistent", "lumped"}
        Mass inverse used inside the preconditioners.
    """

    def __init__(self, ops: OperatorSet, mesh: TriangleMesh, inner_tol=1e-10, inner_max_iter=500, mass="consistent"):
        if ops.n != mesh.n_vertices:
            raise ValueError("operator set and mesh disagree on vertex count")
        self.ops = ops
        self.mesh = mesh
        self.Q = 0.5 * ops.M.toarray() + ops.K
        self.Q.setflags(write=False)
        self.inner_tol = float(inner_tol)
        self.inner_max_iter = int(inner_max_iter)
        self.eps = ops.config.eps
        self.open_surface = not mesh.is_closed
        self.precond = Preconditioners(ops, component_indicators(mesh), mass)
        self.inner_iterations = 0

    @property
    def n(self) -> int:
        return self.ops.n

    def solve_v(self, rhs, tol=None):
        """Solve ``V w = rhs`` by PCG with ``P_V^{-1}``; raises InnerSolveDiverged."""
        tol = self.inner_tol if tol is None else tol
        w, rep = pcg(self.ops.V, self.precond.PV_inv, rhs, tol=tol, max_iter=self.inner_max_iter)
        self.inner_iterations += rep.iterations
        if not rep.converged:
            raise InnerSolveDiverged(
                f"inner V-solve stalled at residual {rep.residual:.2e} after {rep.iterations} iterations", rep
            )
        return w

    def neumann_trace(self, u, tol=None):
        """``t = V^{-1} Q u``, the Neumann data of the harmonic extension of ``u``."""
        return self.solve_v(self.Q @ np.asarray(u, dtype=float), tol)

    def apply(self, u, tol=None):
        u = np.asarray(u, dtype=float)
        w = self.neumann_trace(u, tol)
        return self.ops.H @ u + self.Q.T @ w

    def apply_nonsymmetric(self, u, tol=None):
        """Strong-form route lifted to weak form: ``M V^{-1} Q u``."""
        return self.ops.M @ self.neumann_trace(u, tol)

    def operator(self, tol=None) -> Operator:
        return Operator(self.n, lambda x: self.apply(x, tol), True, "S")

    def dense(self):
        """Explicit ``S`` by a direct factorization of ``V`` (testing aid)."""
        w = np.linalg.solve(self.ops.V, self.Q)
        S = self.ops.H + self.Q.T @ w
        return (S + S.T) / 2


def build_dtn(mesh: TriangleMesh, config: AssemblyConfig | None = None, **kwargs) -> DtNOperator:
    return DtNOperator(assemble(mesh, config), mesh, **kwargs)


def open_surface_dtn(mesh: TriangleMesh, config: AssemblyConfig | None = None, **kwargs) -> DtNOperator:
    """Same assembly path as closed meshes; ``open_surface`` records the generalized semantics."""
    return build_dtn(mesh, config, **kwargs)


def apply_dtn(op: DtNOperator, u):
    return op.apply(u)


def apply_dtn_nonsymmetric(op: DtNOperator, u):
    return op.apply_nonsymmetric(u)


def estimate_gamma(V, PV_inv, tol=1e-3, seed=0):
    """``0.9 * sigma_min(P_V^{-1} V)``."""
    return 0.9 * extremal_spd_pencil(V, PV_inv, "min", tol=tol, seed=seed)


def condition_number(V, PV_inv, tol=1e-3, seed=0):
    """``cond(P_V^{-1} V)`` from the two extremal eigenvalues."""
    hi = extremal_spd_pencil(V, PV_inv, "max", tol=tol, seed=seed)
    lo = extremal_spd_pencil(V, PV_inv, "min", tol=tol, seed=seed)
    return hi / lo


class SaddleSystem:
    """Bramble--Pasciak transformed block system for ``S u = M f``.

    Unknowns are stacked as ``[t; u]``. The transformed matrix ``A`` is
    symmetric positive semidefinite for ``alpha = 1/gamma``.
    """

    def __init__(self, dtn: DtNOperator, gamma=None, seed=0):
        self.dtn = dtn
        ops = dtn.ops
        self.PV = dtn.precond.PV_inv
        self.gamma = estimate_gamma(ops.V, self.PV, seed=seed) if gamma is None else float(gamma)
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        self.alpha = 1.0 / self.gamma
        self.A = Operator(2 * dtn.n, self._apply, True, "A_BP")
        self.P_inv = dtn.precond.pa2_inv(self.alpha)

    def _apply(self, z):
        n = self.dtn.n
        V, H, Q = self.dtn.ops.V, self.dtn.ops.H, self.dtn.Q
        t, u = z[:n], z[n:]
        a = V @ t - Q @ u
        b = Q.T @ t + H @ u
        pa = self.PV(a)
        return np.concatenate([self.alpha * (V @ pa) - a, b - self.alpha * (Q.T @ pa)])

    def saddle_matrix(self):
        ops = self.dtn.ops
        return np.block([[ops.V, -self.dtn.Q], [self.dtn.Q.T, ops.H]])

    def assembled(self):
        """Dense transformed matrix (columns from unit vectors)."""
        return self.A(np.eye(2 * self.dtn.n))

    def rhs(self, f):
        n = self.dtn.n
        return np.concatenate([np.zeros(n), self.dtn.ops.M @ f])


def _deflate(dtn: DtNOperator, f, deflate, tol):
    Y = component_indicators(dtn.mesh, closed_only=True)
    if Y.shape[1] == 0:
        return f, Y
    M = dtn.ops.M
    MY = M @ Y
    coef = (Y.T @ (M @ f)) / np.einsum("ij,ij->j", Y, MY)
    const = Y @ coef
    if np.linalg.norm(const) > tol * max(np.linalg.norm(f), 1e-300):
        if not deflate:
            raise RankDeficient("right-hand side has a constant component; the system is singular")
    return f - const, Y


def solve_dtn_linear(dtn: DtNOperator, f, tol=1e-8, max_iter=1000, deflate=True, gamma=None, system=None):
    """Solve ``S u = M f`` with Bramble--Pasciak CG; returns ``(u, t, report)``.

    On closed components the system is singular; the constant part of ``f``
    is removed (``deflate=True``) and ``u`` is returned with zero mean per
    closed component.
    """
    f = np.asarray(f, dtype=float)
    n = dtn.n
    f0 = np.linalg.norm(f)
    f, Y = _deflate(dtn, f, deflate, tol)
    if np.linalg.norm(f) <= 1e-12 * f0 or not np.any(f):
        return np.zeros(n), np.zeros(n), SolveReport(converged=True, residual=0.0, tolerance=tol)
    system = system or SaddleSystem(dtn, gamma)
    z, rep = pcg(system.A, system.P_inv, system.rhs(f), tol=tol, max_iter=max_iter)
    if not rep.converged:
        raise NoConvergence(f"Bramble-Pasciak CG stopped at residual {rep.residual:.2e}", rep)
    t, u = z[:n], z[n:]
    if Y.shape[1]:
        M = dtn.ops.M
        u = u - Y @ ((Y.T @ (M @ u)) / np.einsum("ij,ij->j", Y, M @ Y))
    return u, t, rep


@dataclass
class SteklovSpectrum:
    eigenvalues: np.ndarray
    U: np.ndarray
    Tn: np.ndarray
    residuals: np.ndarray
    report: dict = field(default_factory=dict)
    mesh_checksum: str = ""
    n_analytic: int = 0
    history: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.eigenvalues)

    def to_json_dict(self, extra=None):
        d = {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
            "mesh_checksum": self.mesh_checksum,
            "analytic_null_modes": int(self.n_analytic),
            "converged": bool(self.report.get("converged", True)),
        }
        if extra:
            d.update(extra)
        return d

    def write_json(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(extra), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path, which="U", meta_lines=()):
        data = self.U if which == "U" else self.Tn
        prefix = "u" if which == "U" else "t"
        with open(path, "w") as fh:
            for line in meta_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(f"{prefix}{i}" for i in range(data.shape[1])) + "\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def steklov_eigs(dtn: DtNOperator, k, tol=1e-6, max_iter=100, seed=0, guard=None, X0=None, verbose=False):
    """Smallest ``k`` Steklov eigenpairs of the pencil ``(S, M)``.

    Constants on each closed component are exact null vectors; they are
    emitted analytically and LOBPCG runs M-orthogonal to them. Inner solves
    use ``1e-2 * tol`` and a final sweep uses ``1e-3 * tol``.
    """
    n = dtn.n
    if k < 1:
        raise ValueError("k must be positive")
    if 2 * k >= n:
        raise ValueError(f"k={k} must be below n/2={n / 2}")
    M = dtn.ops.M
    Y = component_indicators(dtn.mesh, closed_only=True)
    Y = Y / np.sqrt(np.einsum("ij,ij->j", Y, M @ Y))
    n0 = min(Y.shape[1], k)
    k_rest = k - n0
    lam0 = np.zeros(n0)
    U0 = Y[:, :n0]
    report = {"iterations": 0, "converged": True, "inner_iterations": 0}
    history = []
    lam = np.zeros(0)
    X = np.zeros((n, 0))
    res = np.zeros(0)
    failure = None
    if k_rest > 0:
        guard = max(5, math.ceil(k / 5)) if guard is None else int(guard)
        m = min(k_rest + guard, n - Y.shape[1] - 1)
        rng = np.random.default_rng(seed)
        X0 = rng.standard_normal((n, m)) if X0 is None else np.asarray(X0, dtype=float)
        dtn.inner_iterations = 0
        try:
            lam, X, rep = lobpcg(
                dtn.operator(1e-2 * tol), M, dtn.precond.PS_inv, X0, k=k_rest, tol=tol, max_iter=max_iter,
                constraints=Y if Y.shape[1] else None, A_final=dtn.operator(1e-3 * tol), seed=seed + 1, verbose=verbose,
            )
        except NotConverged as exc:
            failure = exc
            rep = exc.report
            lam, X = exc.result
        res = rep.residuals
        history = [np.concatenate([lam0, h]) for h in rep.history]
        report.update(rep.as_dict())
        report["inner_iterations"] = dtn.inner_iterations
    U = np.hstack([U0, X])
    evals = np.concatenate([lam0, lam])
    res0 = np.array([np.linalg.norm(dtn.apply(u)) / np.linalg.norm(M @ u) for u in U0.T]) if n0 else np.zeros(0)
    residuals = np.concatenate([res0, res])
    Tn = dtn.solve_v(dtn.Q @ U, tol=min(1e-10, 1e-3 * tol)) if U.shape[1] else np.zeros((n, 0))
    Tn = Tn.reshape(n, -1)
    spec = SteklovSpectrum(evals, U, Tn, residuals, report, dtn.mesh.checksum, n0, history)
    if failure is not None:
        raise NotConverged(str(failure), failure.report, spec)
    return spec


def evaluate_interior(mesh: TriangleMesh, g, g_n, points, degree=5):
    """Representation formula ``u(x) = SL[g_n](x) - DL[g](x)`` at interior points.

    Values at points outside the domain are meaningless (they tend to 0 for a
    closed surface).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rule = triangle_rule(degree)
    P = np.ascontiguousarray(mesh.vertices)
    T = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
    N = np.ascontiguousarray(mesh.normals)
    A2 = np.ascontiguousarray(2.0 * mesh.areas)
    sl_ = _assembly.single_layer_potential(pts, P, T, N, A2, np.ascontiguousarray(rule.nodes), np.ascontiguousarray(rule.weights), np.asarray(g_n, dtype=float))
    dl = _assembly.double_layer_potential(pts, P, T, N, A2, np.asarray(g, dtype=float))
    return sl_ - dl
