"""Spectral shape analysis on truncated eigenbases.

Everything here consumes a :class:`TruncatedSpectrum`: ascending eigenvalues
with M-orthonormal vertex eigenvectors, from the Steklov pencil, the
cotangent Laplacian, or the FEM Schur complement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.cluster import KMeans

from .errors import RankDeficiencyWarning, SingularGram
from .mesh import TriangleMesh, isoperimetric_scale

LN10 = np.log(10.0)


@dataclass(frozen=True)
class TruncatedSpectrum:
    eigenvalues: np.ndarray
    phi: np.ndarray
    M: sp.spmatrix
    source: str = "steklov"
    zero_tol: float = 1e-8

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(lam) < -1e-12 * max(1.0, np.abs(lam).max(initial=0))):
            raise ValueError("eigenvalues must be ascending")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))

    @classmethod
    def from_steklov(cls, spectrum, M):
        return cls(spectrum.eigenvalues, spectrum.U, M, "steklov")

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_zero(self) -> int:
        """Number of leading (numerically) zero eigenvalues."""
        lam = self.eigenvalues
        scale = np.abs(lam).max(initial=0.0)
        return int(np.sum(lam <= self.zero_tol * max(scale, 1e-300)))

    def nonzero(self):
        z = self.n_zero
        return self.eigenvalues[z:], self.phi[:, z:]

    def truncated(self, k):
        return TruncatedSpectrum(self.eigenvalues[:k], self.phi[:, :k], self.M, self.source, self.zero_tol)


@dataclass
class DescriptorTable:
    values: np.ndarray
    grid: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def write_csv(self, path, meta_lines=()):
        with open(path, "w") as fh:
            for line in meta_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(f"{self.kind}_{g:.10g}" for g in self.grid) + "\n")
            np.savetxt(fh, self.values, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------- kernels and signatures


def heat_kernel(spec: TruncatedSpectrum, t, x, y):
    """``sum_i exp(-lambda_i t) phi_i(x) phi_i(y)``."""
    if t <= 0:
        raise ValueError("t must be positive")
    w = np.exp(-spec.eigenvalues * t)
    return float(np.sum(w * (spec.phi[x] * spec.phi[y])))


def heat_kernel_matrix(spec: TruncatedSpectrum, t):
    w = np.exp(-spec.eigenvalues * t)
    return (spec.phi * w) @ spec.phi.T


def default_time_grid(spec: TruncatedSpectrum, num=100):
    """Log-spaced times on ``[4 ln10 / lambda_max, 4 ln10 / lambda_min]`` over nonzero modes."""
    lam, _ = spec.nonzero()
    if len(lam) == 0:
        raise ValueError("spectrum has no nonzero eigenvalues")
    lo, hi = 4 * LN10 / lam[-1], 4 * LN10 / lam[0]
    return np.geomspace(lo, hi, num) if num > 1 else np.array([lo])


def hks(spec: TruncatedSpectrum, times=None, scaled=False, num=100) -> DescriptorTable:
    """Heat kernel signature ``h_t(x) = k_t(x, x)``.

    ``scaled=True`` divides each column by its area-weighted mean over the mesh.
    """
    times = default_time_grid(spec, num) if times is None else np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    W = np.exp(-np.outer(spec.eigenvalues, times))
    vals = (spec.phi**2) @ W
    meta = {"times": "default" if times is None else "given", "eigenpairs": spec.k, "scaled": bool(scaled)}
    if spec.k < 300:
        meta["note"] = f"time window uses lambda_{spec.k - 1} and the first nonzero eigenvalue"
    if scaled:
        mass = np.asarray(spec.M.sum(axis=1)).ravel()
        vals = vals / ((mass @ vals) / mass.sum())
    return DescriptorTable(vals, times, "hks", meta)


def default_energy_grid(spec: TruncatedSpectrum, num=100):
    lam, _ = spec.nonzero()
    if len(lam) == 0:
        raise ValueError("spectrum has no nonzero eigenvalues")
    return np.linspace(np.log(lam[0]), np.log(lam[-1]), num) if num > 1 else np.array([np.log(lam[0])])


def wks_weights(spec: TruncatedSpectrum, energies, sigma):
    """Band weights ``C_e exp(-(e - log lambda_i)^2 / 2 sigma^2)``, each column summing to one."""
    lam, _ = spec.nonzero()
    G = np.exp(-((energies[None, :] - np.log(lam)[:, None]) ** 2) / (2 * sigma**2))
    return G / G.sum(axis=0, keepdims=True)


def wks(spec: TruncatedSpectrum, energies=None, sigma=None, num=100) -> DescriptorTable:
    """Wave kernel signature with log-normal energy bands over the nonzero modes."""
    lam, phi = spec.nonzero()
    if len(lam) == 0:
        raise ValueError("spectrum has no nonzero eigenvalues")
    energies = default_energy_grid(spec, num) if energies is None else np.atleast_1d(np.asarray(energies, dtype=float))
    if sigma is None:
        step = (energies[-1] - energies[0]) / (len(energies) - 1) if len(energies) > 1 else 0.0
        sigma = 7.0 * step if step > 0 else 0.1 * max(np.log(lam[-1] / lam[0]), 1.0)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    W = wks_weights(spec, energies, sigma)
    return DescriptorTable((phi**2) @ W, energies, "wks", {"sigma": float(sigma), "eigenpairs": spec.k})


# ---------------------------------------------------------------- distances and embeddings


def _targets(ys):
    return np.atleast_1d(np.asarray(ys, dtype=np.int64))


def diffusion_distance(spec: TruncatedSpectrum, t, x, ys):
    """``d(x, y)^2 = sum_{i>=1} exp(-2 t lambda_i) (phi_i(x) - phi_i(y))^2``."""
    if t <= 0:
        raise ValueError("t must be positive")
    lam, phi = spec.nonzero()
    diff = phi[_targets(ys)] - phi[x]
    return np.sqrt(np.sum(np.exp(-2 * t * lam) * diff**2, axis=1))


def bisteklov_distance(spec: TruncatedSpectrum, x, ys):
    """``d(x, y)^2 = sum_{i>=1} (phi_i(x) - phi_i(y))^2 / lambda_i^2``."""
    lam, phi = spec.nonzero()
    diff = phi[_targets(ys)] - phi[x]
    return np.sqrt(np.sum(diff**2 / lam**2, axis=1))


def null_coordinates(spec: TruncatedSpectrum):
    """Null-space directions orthogonal to the global constant (one per extra component)."""
    z = spec.n_zero
    if z < 2:
        return np.zeros((spec.phi.shape[0], 0))
    Z = spec.phi[:, :z]
    ones = np.ones(Z.shape[0])
    a = Z.T @ (spec.M @ ones)
    # orthonormal complement of a inside the null block
    Q, _ = np.linalg.qr(np.column_stack([a, np.eye(z)]))
    Y = Z @ Q[:, 1:z]
    for j in range(Y.shape[1]):
        if Y[np.argmax(np.abs(Y[:, j])), j] < 0:
            Y[:, j] *= -1
    return Y


def spectral_embedding(spec: TruncatedSpectrum, k=None, null_weight=10.0):
    """Rows ``(phi_1(x)/sqrt(lambda_1), ..., phi_k(x)/sqrt(lambda_k))`` over nonzero modes.

    On multi-component surfaces the extra null modes carry no finite
    ``1/sqrt(lambda)`` weight; they are prepended with weight
    ``null_weight / sqrt(lambda_1)`` so components stay separable.
    Pass ``null_weight=0`` for the nonzero modes alone.
    """
    lam, phi = spec.nonzero()
    k = len(lam) if k is None else int(k)
    if k > len(lam) or k < 1:
        raise ValueError(f"need 1 <= k <= {len(lam)} nonzero modes")
    X = phi[:, :k] / np.sqrt(lam[:k])
    if null_weight and spec.n_zero > 1:
        X = np.hstack([null_coordinates(spec) * (null_weight / np.sqrt(lam[0])), X])
    return X


def segment(mesh: TriangleMesh, spec: TruncatedSpectrum, clusters, restarts=10, seed=0, k=None, return_inertia=False):
    """k-means labels on the spectral embedding (best of ``restarts`` k-means++ runs)."""
    if clusters < 1:
        raise ValueError("clusters must be positive")
    if spec.phi.shape[0] != mesh.n_vertices:
        raise ValueError("spectrum and mesh disagree on vertex count")
    if clusters == 1:
        labels = np.zeros(mesh.n_vertices, dtype=np.int64)
        return (labels, 0.0) if return_inertia else labels
    X = spectral_embedding(spec, k)
    km = KMeans(n_clusters=clusters, init="k-means++", n_init=restarts, max_iter=100, algorithm="lloyd", random_state=seed)
    labels = km.fit_predict(X).astype(np.int64)
    # canonical numbering: clusters ordered by their smallest vertex index
    _, first = np.unique(labels, return_index=True)
    order = np.unique(labels)[np.argsort(first)]
    remap = np.empty(clusters, dtype=np.int64)
    remap[order] = np.arange(len(order))
    labels = remap[labels]
    return (labels, float(km.inertia_)) if return_inertia else labels


# ---------------------------------------------------------------- functional maps and shape differences


def correspondence_matrix(correspondence, n_source, n_target):
    """Transfer matrix ``P`` (n_target x n_source) with ``P[T(x), x] = 1``, rows averaged."""
    c = np.asarray(correspondence, dtype=np.int64)
    if c.shape != (n_source,):
        raise ValueError(f"correspondence must list one target per source vertex ({n_source})")
    if c.min(initial=0) < 0 or c.max(initial=0) >= n_target:
        raise IndexError("correspondence target index out of range")
    P = sp.csr_matrix((np.ones(n_source), (c, np.arange(n_source))), shape=(n_target, n_source))
    hits = np.asarray(P.sum(axis=1)).ravel()
    scale = np.divide(1.0, hits, out=np.zeros_like(hits), where=hits > 0)
    return sp.diags(scale) @ P


def functional_map(specM: TruncatedSpectrum, specN: TruncatedSpectrum, correspondence, cond_limit=1e6):
    """``F = Phi_N^T M_N P Phi_M``: coefficients on M to coefficients on N."""
    P = correspondence_matrix(correspondence, specM.phi.shape[0], specN.phi.shape[0])
    F = specN.phi.T @ (specN.M @ (P @ specM.phi))
    s = np.linalg.svd(F, compute_uv=False)
    if s.size and (s[-1] == 0 or s[0] / s[-1] > cond_limit):
        warnings.warn(f"functional map is rank deficient (cond {s[0] / max(s[-1], 1e-300):.2e})", RankDeficiencyWarning, stacklevel=2)
    return F


@dataclass(frozen=True)
class ShapeDifference:
    D: np.ndarray
    F: np.ndarray
    base: str
    G: np.ndarray
    offset: int = 0


def _gram(spec: TruncatedSpectrum, base, L=None):
    if base == "area":
        return spec.phi.T @ (spec.M @ spec.phi), 0
    z = spec.n_zero
    if base == "steklov":
        return np.diag(spec.eigenvalues[z:]), z
    if base == "conformal":
        if L is None:
            raise ValueError("conformal base needs the cotangent Laplacian")
        phi = spec.phi[:, z:]
        G = phi.T @ (L @ phi)
        return (G + G.T) / 2, z
    raise ValueError(f"unknown base {base!r}")


def shape_difference(specM, specN, F, base="steklov", L_M=None, L_N=None, cond_limit=1e12) -> ShapeDifference:
    """``D = G_M^{-1} F^T G_N F`` with Gram matrices of the chosen inner product.

    For ``conformal`` and ``steklov`` the null modes of each basis are removed
    first (those Gram matrices vanish on constants).
    """
    F = np.asarray(F, dtype=float)
    if F.shape != (specN.k, specM.k):
        raise ValueError(f"F has shape {F.shape}, expected {(specN.k, specM.k)}")
    GM, zM = _gram(specM, base, L_M)
    GN, zN = _gram(specN, base, L_N)
    Fr = F[zN:, zM:]
    w = np.linalg.eigvalsh(GM)
    if w.size == 0 or w[0] <= 0 or w[-1] / w[0] > cond_limit:
        raise SingularGram(f"{base} Gram matrix on the source is singular or ill conditioned")
    D = np.linalg.solve(GM, Fr.T @ GN @ Fr)
    return ShapeDifference(D, F, base, GM, zM)


def pointwise_distortion(sd: ShapeDifference, specM: TruncatedSpectrum, rtol=1e-12):
    """Per-vertex ``(c^T G c) / (c^T G D c)`` with ``c`` the projected hat of the vertex.

    Vertices whose denominator is negligible get ``+inf``.
    """
    C = (specM.M @ specM.phi).T[sd.offset :]
    num = np.einsum("ki,kl,li->i", C, sd.G, C)
    den = np.einsum("ki,kl,li->i", C, sd.G @ sd.D, C)
    out = np.full(C.shape[1], np.inf)
    ok = np.abs(den) > rtol * np.abs(num).max(initial=0)
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------- global descriptors


def shape_dna(eigenvalues, count, normalize=False, mesh: TriangleMesh | None = None):
    """First ``count`` eigenvalues, optionally multiplied by the isoperimetric scale."""
    lam = np.asarray(getattr(eigenvalues, "eigenvalues", eigenvalues), dtype=float)
    if count > len(lam):
        raise ValueError(f"only {len(lam)} eigenvalues available")
    out = lam[:count].copy()
    if normalize:
        if mesh is None:
            raise ValueError("normalization needs the mesh")
        out *= isoperimetric_scale(mesh)
    return out


def pca_embed(vectors, dims=2):
    """Centered PCA coordinates on the top ``dims`` components (sign fixed by the largest loading)."""
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two vectors")
    Xc = X - X.mean(axis=0)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    dims = min(dims, len(s))
    for j in range(dims):
        if Vt[j, np.argmax(np.abs(Vt[j]))] < 0:
            U[:, j] *= -1
            Vt[j] *= -1
    return U[:, :dims] * s[:dims]
