"""Galerkin boundary-element matrices for the Laplace kernel on P1 hats.

``V`` single layer, ``K`` double layer, ``T = K^T`` adjoint double layer,
``H`` hypersingular operator and ``M`` the surface mass matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _assembly
from .errors import CoincidentPoints, DegenerateTriangle, ParseError
from .mesh import TriangleMesh
from .quadrature import Kernel, collapsed_gauss_rule, sauter_schwab_rule, triangle_rule, PairClass


def _v(d, r, nx, ny):
    return 1.0 / r


def _k(d, r, nx, ny):
    return np.sum(d * ny, axis=-1) / r**3


def _t(d, r, nx, ny):
    return -np.sum(d * nx, axis=-1) / r**3


def _h(d, r, nx, ny):
    a = np.sum(d * ny, axis=-1)
    b = -np.sum(d * nx, axis=-1)
    return -np.sum(nx * ny, axis=-1) / r**3 - 3.0 * a * b / r**5


KERNELS = {
    "v": Kernel(_v, "v"),
    "k": Kernel(_k, "k"),
    "t": Kernel(_t, "t"),
    "h": Kernel(_h, "h"),
}


def kernel_eval(kind, x, y, nx, ny) -> float:
    """Evaluate one of the kernels ``v, k, t, h`` (without the 1/4pi factor)."""
    try:
        fn = KERNELS[kind].fn
    except KeyError:
        raise ValueError(f"unknown kernel {kind!r}") from None
    x, y, nx, ny = (np.asarray(a, dtype=float) for a in (x, y, nx, ny))
    d = x - y
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise CoincidentPoints(f"kernel {kind} evaluated at x == y")
    return float(fn(d, r, nx, ny))


@dataclass(frozen=True)
class AssemblyConfig:
    """Quadrature orders and kernel regularization.

    ``near_factor`` marks disjoint pairs whose centroid distance is below that
    multiple of the larger triangle diameter; they get a denser rule.
    """

    singular_order: int = 4
    regular_degree: int = 4
    near_order: int = 4
    near_factor: float = 1.5
    outer_degree: int = 4
    eps: float = 0.0
    analytic_double_layer: bool = True

    def __post_init__(self):
        if min(self.singular_order, self.regular_degree, self.near_order, self.outer_degree) < 1:
            raise ValueError("quadrature orders must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.near_factor < 0:
            raise ValueError("near_factor must be non-negative")


@dataclass(frozen=True, eq=False)
class OperatorSet:
    V: np.ndarray
    K: np.ndarray
    H: np.ndarray
    M: sp.csr_matrix
    M_lumped: sp.dia_matrix
    config: AssemblyConfig = field(default_factory=AssemblyConfig)
    min_distance: float = np.inf

    @property
    def T(self):
        return self.K.T

    @property
    def n(self) -> int:
        return self.V.shape[0]

    def dump(self, path):
        """Write the matrices in a little-endian binary layout.

        Layout: ``b"BEMDUMP1"``, uint32 count, then per matrix a uint32 name
        length, the ASCII name, uint64 rows, uint64 cols and row-major float64.
        """
        mats = {"V": self.V, "K": self.K, "H": self.H, "M": self.M.toarray(), "M_lumped": self.M_lumped.toarray()}
        write_matrices(path, mats)

    @classmethod
    def load(cls, path):
        mats = read_matrices(path)
        try:
            return cls(
                V=mats["V"], K=mats["K"], H=mats["H"], M=sp.csr_matrix(mats["M"]),
                M_lumped=sp.diags(np.diag(mats["M_lumped"])),
            )
        except KeyError as exc:
            raise ParseError(f"operator dump lacks matrix {exc}") from None


_MAGIC = b"BEMDUMP1"


def write_matrices(path, mats: dict):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(mats)))
        for name, a in mats.items():
            a = np.ascontiguousarray(np.atleast_2d(np.asarray(a, dtype="<f8")))
            raw = name.encode("ascii")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", *a.shape))
            fh.write(a.tobytes())


def read_matrices(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ParseError("not a matrix dump")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + ln].decode("ascii")
            pos += ln
            rows, cols = struct.unpack_from("<QQ", data, pos)
            pos += 16
            nbytes = 8 * rows * cols
            if pos + nbytes > len(data):
                raise ParseError("truncated matrix dump")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += nbytes
    except struct.error as exc:
        raise ParseError(f"truncated matrix dump: {exc}") from None
    return out


def mass_matrix(mesh: TriangleMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix: ``A/6`` on the diagonal and ``A/12`` off it, per triangle."""
    tri = mesh.triangles
    a = mesh.areas
    local = (np.full((3, 3), 1.0 / 12.0) + np.eye(3) / 12.0)[None] * a[:, None, None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def lumped_mass(mesh: TriangleMesh) -> sp.dia_matrix:
    """Diagonal mass with entry ``i`` equal to a third of the area around vertex ``i``."""
    d = np.zeros(mesh.n_vertices)
    np.add.at(d, mesh.triangles.ravel(), np.repeat(mesh.areas / 3.0, 3))
    return sp.diags(d)


def _rule_arrays(config: AssemblyConfig):
    reg = triangle_rule(config.regular_degree)
    near = collapsed_gauss_rule(config.near_order)
    near = (near.nodes, near.weights / near.weights.sum())
    outer = triangle_rule(config.outer_degree) if config.outer_degree <= 5 else collapsed_gauss_rule(config.outer_degree // 2 + 1)
    outer = (outer.nodes, outer.weights / outer.weights.sum())
    ss = [sauter_schwab_rule(c, config.singular_order) for c in (PairClass.COINCIDENT, PairClass.SHARED_EDGE, PairClass.SHARED_VERTEX)]
    return reg, near, outer, ss


def assemble_dense(mesh: TriangleMesh, config: AssemblyConfig | None = None, which=("V", "K", "H")):
    """Assemble the requested dense matrices; returns ``(dict, min_distance)``."""
    config = config or AssemblyConfig()
    if mesh.n_triangles == 0:
        raise DegenerateTriangle("mesh has no triangles")
    if np.any(mesh.areas <= 0):
        raise DegenerateTriangle(f"{int(np.sum(mesh.areas <= 0))} triangle(s) with zero area reached assembly")
    reg, near, outer, ss = _rule_arrays(config)
    (ssc, sse, ssv) = ss
    analytic = config.analytic_double_layer and config.eps == 0.0
    V, K, H, rmin = _assembly.assemble_dense(
        np.ascontiguousarray(mesh.vertices, dtype=np.float64),
        np.ascontiguousarray(mesh.triangles, dtype=np.int64),
        np.ascontiguousarray(mesh.normals),
        np.ascontiguousarray(2.0 * mesh.areas),
        np.ascontiguousarray(reg.nodes), np.ascontiguousarray(reg.weights),
        np.ascontiguousarray(near[0]), np.ascontiguousarray(near[1]),
        np.ascontiguousarray(outer[0]), np.ascontiguousarray(outer[1]),
        np.ascontiguousarray(ssc[0]), np.ascontiguousarray(ssc[1]), np.ascontiguousarray(ssc[2]),
        np.ascontiguousarray(sse[0]), np.ascontiguousarray(sse[1]), np.ascontiguousarray(sse[2]),
        np.ascontiguousarray(ssv[0]), np.ascontiguousarray(ssv[1]), np.ascontiguousarray(ssv[2]),
        float(config.eps), float(config.near_factor),
        "V" in which, "K" in which, "H" in which, analytic,
    )
    out = {}
    for name, mat in (("V", V), ("K", K), ("H", H)):
        if name in which:
            mat.setflags(write=False)
            out[name] = mat
    return out, float(rmin)


def assemble(mesh: TriangleMesh, config: AssemblyConfig | None = None) -> OperatorSet:
    """Assemble the full operator set for a mesh (at least four vertices)."""
    config = config or AssemblyConfig()
    if mesh.n_vertices < 4:
        raise ValueError("assembly needs at least four vertices")
    mats, rmin = assemble_dense(mesh, config)
    M = mass_matrix(mesh)
    return OperatorSet(V=mats["V"], K=mats["K"], H=mats["H"], M=M, M_lumped=lumped_mass(mesh), config=config, min_distance=rmin)
