"""Preconditioned Krylov solvers: block PCG, LOBPCG and extremal eigenvalues."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp

from .errors import BreakdownError, IllConditionedBasis, NoConvergence, NotConverged


@dataclass(frozen=True)
class Operator:
    """Linear map ``x -> A x`` on vectors or ``n x m`` blocks."""

    n: int
    action: Callable
    symmetric: bool = True
    name: str = "operator"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ValueError(f"{self.name}: expected leading dimension {self.n}, got {x.shape[0]}")
        return self.action(x)

    @classmethod
    def from_matrix(cls, A, symmetric=True, name="matrix"):
        if sp.issparse(A):
            A = A.tocsr()
        else:
            A = np.asarray(A, dtype=float)
        return cls(A.shape[0], lambda x: A @ x, symmetric, name)

    @classmethod
    def identity(cls, n):
        return cls(n, lambda x: np.array(x, dtype=float, copy=True), True, "identity")

    def check_linear(self, rng=None, probes=3, rtol=1e-10):
        """Probe additivity and homogeneity; returns the worst relative defect."""
        rng = np.random.default_rng(rng)
        worst = 0.0
        for _ in range(probes):
            x, y = rng.standard_normal((2, self.n))
            a = rng.standard_normal()
            lhs = self(x + a * y)
            rhs = self(x) + a * self(y)
            worst = max(worst, np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))
        if worst > rtol:
            raise ValueError(f"{self.name} is not linear on probes (defect {worst:.2e})")
        return worst


def as_operator(A, n=None, name="operator") -> Operator:
    if isinstance(A, Operator):
        return A
    if A is None:
        if n is None:
            raise ValueError("identity operator needs a dimension")
        return Operator.identity(n)
    if callable(A) and not hasattr(A, "shape"):
        if n is None:
            raise ValueError("callable operator needs a dimension")
        return Operator(n, A, True, name)
    return Operator.from_matrix(A, name=name)


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = np.inf
    converged: bool = False
    wall_time: float = 0.0
    tolerance: float = 0.0
    history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "wall_time": float(self.wall_time),
            "tolerance": float(self.tolerance),
        }


def pcg(A, P_inv, b, tol=1e-8, max_iter=None, x0=None, raise_on_fail=False):
    """Preconditioned conjugate gradients for one or several right-hand sides.

    Columns of a block ``b`` are independent CG runs advanced together. The
    stopping test is ``|A x - b| <= tol |b|`` per column. ``report.history``
    holds, per iteration, the worst relative residual and the preconditioned
    residual norm ``sqrt(r^T P^{-1} r)``.
    """
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    n, m = B.shape
    A = as_operator(A, n, "A")
    P = as_operator(P_inv, n, "P_inv")
    max_iter = 10 * n if max_iter is None else int(max_iter)
    t0 = time.perf_counter()
    bnorm = np.linalg.norm(B, axis=0)
    zero = bnorm == 0
    bnorm[zero] = 1.0
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(n, m)
    R = B - A(X) if x0 is not None else B.copy()
    rel = np.linalg.norm(R, axis=0) / bnorm
    rel[zero] = 0.0
    report = SolveReport(tolerance=tol)
    active = rel > tol
    Z = P(R)
    rz = np.einsum("ij,ij->j", R, Z)
    Pdir = Z.copy()
    report.history.append((float(rel.max(initial=0.0)), float(np.sqrt(np.abs(rz).max(initial=0.0)))))
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.flatnonzero(active)
        Pa = Pdir[:, idx]
        AP = A(Pa)
        pAp = np.einsum("ij,ij->j", Pa, AP)
        if np.any(pAp <= 0):
            raise BreakdownError(f"non-positive curvature p^T A p = {pAp.min():.3e} at iteration {it}")
        alpha = rz[idx] / pAp
        X[:, idx] += Pa * alpha
        R[:, idx] -= AP * alpha
        rel[idx] = np.linalg.norm(R[:, idx], axis=0) / bnorm[idx]
        Zi = P(R[:, idx])
        rz_new = np.einsum("ij,ij->j", R[:, idx], Zi)
        beta = rz_new / rz[idx]
        Pdir[:, idx] = Zi + Pa * beta
        rz[idx] = rz_new
        active[idx] = rel[idx] > tol
        report.history.append((float(rel.max()), float(np.sqrt(np.abs(rz).max()))))
    report.iterations = it
    report.residual = float(rel.max(initial=0.0))
    report.converged = bool(not np.any(active))
    report.wall_time = time.perf_counter() - t0
    if raise_on_fail and not report.converged:
        raise NoConvergence(f"PCG stopped at residual {report.residual:.2e} after {it} iterations", report)
    return (X[:, 0] if single else X), report


# ---------------------------------------------------------------- LOBPCG


def _svqb(V, BV, AV, drop=1e-12):
    """B-orthonormalize the columns of V, dropping near-dependent directions."""
    if V.shape[1] == 0:
        return V, BV, AV
    G = V.T @ BV
    G = (G + G.T) / 2
    d = np.sqrt(np.abs(np.diag(G)))
    keep = d > 0
    if not np.all(keep):
        V, BV, G, d = V[:, keep], BV[:, keep], G[np.ix_(keep, keep)], d[keep]
        AV = None if AV is None else AV[:, keep]
    D = 1.0 / d
    G = G * D[:, None] * D[None, :]
    w, U = np.linalg.eigh(G)
    good = w > drop * max(w.max(), 1e-300)
    Tm = (D[:, None] * U[:, good]) / np.sqrt(w[good])
    return V @ Tm, BV @ Tm, (None if AV is None else AV @ Tm)


def _orth_against(V, BV, AV, blocks):
    """Remove B-components along already B-orthonormal blocks (two passes)."""
    for _ in range(2):
        for Q, BQ, AQ in blocks:
            C = BQ.T @ V
            V = V - Q @ C
            BV = BV - BQ @ C
            if AV is not None:
                AV = AV - AQ @ C
    return V, BV, AV


class _Constraint:
    def __init__(self, Y, B):
        self.Y = Y
        self.BY = B(Y)
        G = Y.T @ self.BY
        self.G = sl.cho_factor((G + G.T) / 2)

    def project(self, X):
        return X - self.Y @ sl.cho_solve(self.G, self.BY.T @ X)


def lobpcg(
    A,
    B,
    P_inv,
    X0,
    k=None,
    tol=1e-6,
    max_iter=100,
    constraints=None,
    A_final=None,
    cluster_rtol=1e-2,
    max_block=None,
    seed=0,
    verbose=False,
):
    """Smallest ``k`` eigenpairs of the pencil ``(A, B)`` by block LOBPCG.

    Parameters
    ----------
    A, B, P_inv : Operator, matrix, or None
        ``B=None`` and ``P_inv=None`` mean identity.
    X0 : ndarray (n, m)
        Initial block; ``m >= k``. Extra columns act as guard vectors.
    tol : float
        Stop when ``|A x - lambda B x| <= tol |B x|`` for the first ``k`` pairs.
    constraints : ndarray (n, c), optional
        The iteration stays B-orthogonal to these columns.
    A_final : Operator, optional
        A more accurate version of ``A``. Once every pair meets ``tol`` with
        ``A`` the block is re-evaluated with ``A_final`` and iteration resumes
        with it until the test passes there too.
    cluster_rtol : float
        If the last Ritz value of the block lies within this relative distance
        of the k-th one, the block edge cuts an eigenvalue cluster and
        convergence inside that cluster stalls. The block is then widened by
        its initial guard size with fresh random columns, up to ``max_block``.
        Set to 0 to keep the block size fixed.

    Returns
    -------
    lam : ndarray (k,)
    X : ndarray (n, k), B-orthonormal
    report : SolveReport, with ``history`` the Ritz values per iteration and
        ``residuals`` the final relative residual norms.
    """
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    n, m = X0.shape
    k = m if k is None else int(k)
    if k > m:
        raise ValueError("block size must be at least k")
    A = as_operator(A, n, "A")
    B = as_operator(B, n, "B")
    P = as_operator(P_inv, n, "P_inv")
    t0 = time.perf_counter()
    con = None
    if constraints is not None and np.size(constraints):
        Y = np.asarray(constraints, dtype=float).reshape(n, -1)
        con = _Constraint(Y, B)
    report = SolveReport(tolerance=tol)
    report.residuals = np.full(k, np.inf)

    X = con.project(X0) if con else X0.copy()
    BX = B(X)
    X, BX, _ = _svqb(X, BX, None)
    X, BX, _ = _svqb(X, BX, None)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        # a rank-deficient start block is refilled with random directions
        if X.shape[1] >= m:
            break
        Xe = rng.standard_normal((n, m - X.shape[1]))
        if con:
            Xe = con.project(Xe)
        BXe = B(Xe)
        Xe, BXe, _ = _orth_against(Xe, BXe, None, [(X, BX, X)])
        Xe, BXe, _ = _svqb(Xe, BXe, None)
        X, BX = np.hstack([X, Xe]), np.hstack([BX, BXe])
        X, BX, _ = _svqb(X, BX, None)
    if X.shape[1] < m:
        raise IllConditionedBasis(f"initial block has rank {X.shape[1]} < {m}")
    AX = A(X)
    H = X.T @ AX
    lam, C = np.linalg.eigh((H + H.T) / 2)
    X, AX, BX = X @ C, AX @ C, BX @ C
    Pd = APd = BPd = None
    final_phase = A_final is None
    guard = max(m - k, 1)
    max_block = min(n // 2, 3 * m) if max_block is None else int(max_block)
    it = 0
    while True:
        R = AX - BX * lam
        res = np.linalg.norm(R, axis=0) / np.maximum(np.linalg.norm(BX, axis=0), 1e-300)
        if (
            cluster_rtol > 0
            and res[k - 1] < 0.1
            and m < max_block
            and lam[m - 1] - lam[k - 1] <= cluster_rtol * abs(lam[k - 1])
        ):
            extra = min(guard, max_block - m)
            Xe = rng.standard_normal((n, extra))
            if con:
                Xe = con.project(Xe)
            BXe = B(Xe)
            Xe, BXe, _ = _orth_against(Xe, BXe, None, [(X, BX, AX)])
            Xe, BXe, _ = _svqb(Xe, BXe, None)
            Xe, BXe, _ = _orth_against(Xe, BXe, None, [(X, BX, AX)])
            Xe, BXe, _ = _svqb(Xe, BXe, None)
            if Xe.shape[1]:
                AXe = A(Xe)
                X, BX, AX = np.hstack([X, Xe]), np.hstack([BX, BXe]), np.hstack([AX, AXe])
                H = X.T @ AX
                lam, C = np.linalg.eigh((H + H.T) / 2)
                X, AX, BX = X @ C, AX @ C, BX @ C
                m = X.shape[1]
                Pd = APd = BPd = None
                if verbose:
                    print(f"lobpcg {it:3d}: block widened to {m} (cluster at the block edge)")
                continue
        report.residuals = res[:k].copy()
        report.history.append(lam[:k].copy())
        if verbose:
            print(f"lobpcg {it:3d}: max res {res[:k].max():.2e}", np.array2string(np.log10(res[:m]), precision=1, max_line_width=300))
        if np.all(res[:k] <= tol):
            if final_phase:
                report.converged = True
                break
            A = as_operator(A_final, n, "A_final")
            final_phase = True
            AX = A(X)
            H = X.T @ AX
            lam, C = np.linalg.eigh((H + H.T) / 2)
            X, AX, BX = X @ C, AX @ C, BX @ C
            Pd = APd = BPd = None
            continue
        if it >= max_iter:
            break
        it += 1
        # soft locking: converged vectors stay in the basis but get no new directions
        active = np.flatnonzero(res > tol)
        W = P(R[:, active])
        if con:
            W = con.project(W)
        BW = B(W)
        blocks = [(X, BX, AX)]
        W, BW, _ = _orth_against(W, BW, None, blocks)
        W, BW, _ = _svqb(W, BW, None)
        W, BW, _ = _orth_against(W, BW, None, blocks)
        W, BW, _ = _svqb(W, BW, None)
        AW = A(W)
        blocks.append((W, BW, AW))
        if Pd is not None and Pd.shape[1]:
            Pd, BPd, APd = _orth_against(Pd, BPd, APd, blocks)
            Pd, BPd, APd = _svqb(Pd, BPd, APd)
            Pd, BPd, APd = _orth_against(Pd, BPd, APd, blocks)
            Pd, BPd, APd = _svqb(Pd, BPd, APd)
            blocks.append((Pd, BPd, APd))
        Z = np.hstack([b[0] for b in blocks])
        AZ = np.hstack([b[2] for b in blocks])
        BZ = np.hstack([b[1] for b in blocks])
        Hz = Z.T @ AZ
        Gz = Z.T @ BZ
        Hz = (Hz + Hz.T) / 2
        Gz = (Gz + Gz.T) / 2
        try:
            mu, Cz = sl.eigh(Hz, Gz)
        except np.linalg.LinAlgError:
            # the basis lost B-orthonormality; fall back to an explicit orthonormalization
            Z, BZ, AZ = _svqb(Z, BZ, AZ)
            if Z.shape[1] < m:
                raise IllConditionedBasis("Rayleigh-Ritz basis collapsed below block size") from None
            Hz = Z.T @ AZ
            mu, Cz = np.linalg.eigh((Hz + Hz.T) / 2)
        Cx = Cz[:, :m]
        lam = mu[:m]
        nx = X.shape[1]
        Xn, AXn, BXn = Z @ Cx, AZ @ Cx, BZ @ Cx
        # new search directions: the non-X part of the Ritz vectors
        Cp = Cx[nx:, :]
        Zr, AZr, BZr = Z[:, nx:], AZ[:, nx:], BZ[:, nx:]
        Pd, APd, BPd = Zr @ Cp[:, active], AZr @ Cp[:, active], BZr @ Cp[:, active]
        X, AX, BX = Xn, AXn, BXn
    report.iterations = it
    report.residual = float(report.residuals.max()) if k else 0.0
    report.wall_time = time.perf_counter() - t0
    lam, X = lam[:k], X[:, :k]
    if not report.converged:
        raise NotConverged(
            f"LOBPCG reached {it} iterations with max residual {report.residual:.2e} > {tol:.1e}",
            report,
            (lam, X),
        )
    return lam, X, report


def extremal_spd_pencil(A, P_inv, which="max", tol=1e-3, max_iter=500, seed=0, n=None):
    """Extremal eigenvalue of ``P^{-1} A`` for SPD ``A`` and ``P^{-1}``.

    ``which="max"`` runs power iteration with the A-weighted Rayleigh quotient
    ``(Ax)^T P^{-1} (Ax) / x^T A x``. ``which="min"`` solves the smallest
    eigenvalue of the equivalent symmetric pencil ``(A P^{-1} A, A)`` with
    LOBPCG preconditioned by ``P^{-1}``; it needs only applications of ``A``
    and ``P^{-1}``.
    """
    if which not in ("min", "max"):
        raise ValueError("which must be 'min' or 'max'")
    if n is None:
        n = A.shape[0] if hasattr(A, "shape") else A.n
    A = as_operator(A, n, "A")
    P = as_operator(P_inv, n, "P_inv")
    rng = np.random.default_rng(seed)
    if which == "max":
        x = rng.standard_normal(n)
        mu_old = None
        for it in range(1, max_iter + 1):
            Ax = A(x)
            PAx = P(Ax)
            mu = float(Ax @ PAx) / float(x @ Ax)
            if mu_old is not None and abs(mu - mu_old) <= tol * 1e-2 * abs(mu):
                return mu
            mu_old = mu
            x = PAx / np.linalg.norm(PAx)
        raise NoConvergence(f"power iteration did not settle within {max_iter} steps")
    sq = Operator(n, lambda x: A(P(A(x))), True, "A P^-1 A")
    X0 = rng.standard_normal((n, max(1, min(4, n // 3))))
    try:
        lam, _, _ = lobpcg(sq, A, P, X0, k=1, tol=tol, max_iter=max_iter)
    except NotConverged as exc:
        raise NoConvergence(str(exc), exc.report) from None
    return float(lam[0])
