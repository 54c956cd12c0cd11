"""Triangle and tetrahedral meshes: data model, file I/O, geometry, repair."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import DegenerateVolume, EmptyMesh, InvertedTet, MeshIndexError, ParseError

logger = logging.getLogger(__name__)

__all__ = [
    "TriangleMesh",
    "TetMesh",
    "MeshStats",
    "load_mesh",
    "save_mesh",
    "load_tet_mesh",
    "save_tet_mesh",
    "enclosed_volume",
    "surface_area",
    "isoperimetric_scale",
    "mesh_stats",
    "orient_outward",
    "repair_mesh",
    "perturb_mesh",
    "remove_random_triangles",
    "transform_mesh",
]


def _readonly(a):
    a.setflags(write=False)
    return a


class TriangleMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions.
    triangles : array_like, shape (m, 3)
        Vertex indices per triangle, counter-clockwise seen from outside.

    Notes
    -----
    Instances are immutable: arrays are stored read-only and derived
    quantities (normals, areas, adjacency) are cached on first use.
    """

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            bad = int(t.max()) if t.max() >= len(v) else int(t.min())
            raise MeshIndexError(f"triangle references vertex {bad} but mesh has {len(v)} vertices")
        self.vertices = _readonly(v)
        self.triangles = _readonly(t)

    def __repr__(self):
        return f"TriangleMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles})"

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.triangles, other.triangles
        )

    __hash__ = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self):
        """Triangle corner positions, shape (m, 3, 3)."""
        return _readonly(self.vertices[self.triangles])

    @cached_property
    def _cross(self):
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self):
        return _readonly(0.5 * np.linalg.norm(self._cross, axis=1))

    @cached_property
    def normals(self):
        """Unit outward normals (zero rows for zero-area triangles)."""
        nrm = np.linalg.norm(self._cross, axis=1)
        out = np.zeros_like(self._cross)
        ok = nrm > 0
        out[ok] = self._cross[ok] / nrm[ok, None]
        return _readonly(out)

    @cached_property
    def centroids(self):
        return _readonly(self.corners.mean(axis=1))

    @cached_property
    def edges(self):
        """Unique undirected edges as sorted index pairs, shape (e, 2)."""
        return _readonly(self._edge_data[0])

    @cached_property
    def edge_triangle_count(self):
        """Number of triangles incident to each entry of :attr:`edges`."""
        return _readonly(self._edge_data[1])

    @cached_property
    def _edge_data(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq.reshape(-1, 2), counts

    @property
    def boundary_edges(self):
        return self.edges[self.edge_triangle_count == 1]

    @property
    def is_closed(self) -> bool:
        return bool(self.n_triangles) and bool(np.all(self.edge_triangle_count == 2))

    @cached_property
    def mean_edge_length(self) -> float:
        e = self.edges
        if len(e) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    @cached_property
    def vertex_triangle_adjacency(self):
        """Sparse (n_vertices, n_triangles) incidence matrix."""
        m = self.n_triangles
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(m), 3)
        return sparse.csr_matrix((np.ones(3 * m), (rows, cols)), shape=(self.n_vertices, m))

    @cached_property
    def components(self):
        """Connected-component label per vertex (vertices linked through triangles)."""
        t = self.triangles
        n = self.n_vertices
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = csgraph.connected_components(adj, directed=False)
        return _readonly(labels)

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1 if self.n_vertices else 0

    def closed_components(self):
        """Labels of components whose every edge is shared by exactly two triangles."""
        labels = self.components
        open_labels = set(labels[self.boundary_edges[:, 0]].tolist()) if len(self.boundary_edges) else set()
        bad = self.edges[self.edge_triangle_count > 2]
        open_labels |= set(labels[bad[:, 0]].tolist())
        used = set(labels[self.triangles[:, 0]].tolist())
        return sorted(used - open_labels)

    @cached_property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()

    def flipped(self, mask=None):
        """Copy with the winding of the selected triangles (default all) reversed."""
        t = np.array(self.triangles)
        sel = slice(None) if mask is None else np.asarray(mask)
        t[sel] = t[sel][:, ::-1]
        return TriangleMesh(self.vertices, t)

    def compacted(self):
        """Copy without unreferenced vertices, plus the old index of each kept vertex."""
        used = np.unique(self.triangles)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[self.triangles]), used

    def submesh(self, triangle_mask):
        return TriangleMesh(self.vertices, self.triangles[np.asarray(triangle_mask)]).compacted()[0]


@dataclass(frozen=True)
class MeshStats:
    surface_area: float
    enclosed_volume: float
    mean_edge_length: float
    isoperimetric_scale: float  # nan when volume <= 0


def surface_area(mesh: TriangleMesh) -> float:
    return float(mesh.areas.sum())


def enclosed_volume(mesh: TriangleMesh) -> float:
    """Signed volume from the boundary flux of ``x / 3``.

    Works on any triangle soup; positive for outward-oriented closed surfaces.
    """
    c = mesh.corners
    s = c[:, 0] + c[:, 1] + c[:, 2]
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    return float(np.einsum("ij,ij->", s, cross) / 18.0)


def isoperimetric_scale(mesh: TriangleMesh) -> float:
    """``Area / Vol**(1/3)``; multiplying Steklov eigenvalues by it removes global scale."""
    vol = enclosed_volume(mesh)
    if not vol > 0:
        raise DegenerateVolume(f"enclosed volume {vol:g} is not positive")
    return surface_area(mesh) / vol ** (1.0 / 3.0)


def mesh_stats(mesh: TriangleMesh) -> MeshStats:
    vol = enclosed_volume(mesh)
    area = surface_area(mesh)
    scale = area / vol ** (1.0 / 3.0) if vol > 0 else float("nan")
    return MeshStats(area, vol, mesh.mean_edge_length, scale)


def orient_outward(mesh: TriangleMesh) -> TriangleMesh:
    """Flip every closed component whose signed volume is negative."""
    labels = mesh.components
    tri_label = labels[mesh.triangles[:, 0]]
    flip = np.zeros(mesh.n_triangles, dtype=bool)
    c = mesh.corners
    per_tri = np.einsum("ij,ij->i", c[:, 0] + c[:, 1] + c[:, 2], mesh._cross) / 18.0
    for lab in mesh.closed_components():
        sel = tri_label == lab
        if per_tri[sel].sum() < 0:
            flip |= sel
    if not flip.any():
        return mesh
    return mesh.flipped(flip)


def transform_mesh(mesh: TriangleMesh, scale=1.0, rotation=None, translation=None) -> TriangleMesh:
    v = np.asarray(mesh.vertices) * scale
    if rotation is not None:
        v = v @ np.asarray(rotation).T
    if translation is not None:
        v = v + np.asarray(translation)
    return TriangleMesh(v, mesh.triangles)


# ---------------------------------------------------------------- file formats


def _data_lines(text):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _faces_to_triangles(faces, triangulate):
    tris = []
    for f in faces:
        if len(f) < 3:
            raise ParseError(f"face with {len(f)} vertices")
        if len(f) > 3 and not triangulate:
            raise ParseError(f"non-triangular face with {len(f)} vertices (pass triangulate=True)")
        for k in range(1, len(f) - 1):
            tris.append((f[0], f[k], f[k + 1]))
    return tris


def _read_off(text, triangulate):
    lines = list(_data_lines(text))
    if not lines or not lines[0].upper().startswith("OFF"):
        raise ParseError("missing OFF header")
    head = lines[0][3:].split()
    idx = 1
    if not head:
        head = lines[1].split()
        idx = 2
    try:
        nv, nf = int(head[0]), int(head[1])
        verts = [[float(x) for x in lines[idx + i].split()[:3]] for i in range(nv)]
        faces = []
        for i in range(nf):
            tok = lines[idx + nv + i].split()
            cnt = int(tok[0])
            faces.append([int(x) for x in tok[1 : 1 + cnt]])
            if len(faces[-1]) != cnt:
                raise ParseError(f"face line {i} is truncated")
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed OFF data: {exc}") from exc
    if any(len(v) != 3 for v in verts):
        raise ParseError("vertex line with fewer than 3 coordinates")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), _faces_to_triangles(faces, triangulate)


def _read_obj(text, triangulate):
    verts, faces = [], []
    try:
        for line in _data_lines(text):
            tok = line.split()
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                face = []
                for item in tok[1:]:
                    k = int(item.split("/")[0])
                    face.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(face)
    except ValueError as exc:
        raise ParseError(f"malformed OBJ data: {exc}") from exc
    if any(len(v) != 3 for v in verts):
        raise ParseError("vertex line with fewer than 3 coordinates")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), _faces_to_triangles(faces, triangulate)


def _format_of(path, format):
    if format is not None:
        return format.upper()
    suffix = Path(path).suffix.lower()
    if suffix in (".off", ".obj"):
        return suffix[1:].upper()
    raise ParseError(f"cannot infer mesh format from {path!r}")


def load_mesh(path, format=None, triangulate=False, orient=True) -> TriangleMesh:
    """Read an ASCII OFF or OBJ triangle mesh.

    Closed components with negative signed volume are re-wound so that
    normals point outward (set ``orient=False`` to keep the file winding).
    Polygons with more than three vertices raise :class:`ParseError`
    unless ``triangulate`` is set, in which case they are fan-triangulated.
    """
    fmt = _format_of(path, format)
    text = Path(path).read_text()
    reader = {"OFF": _read_off, "OBJ": _read_obj}.get(fmt)
    if reader is None:
        raise ParseError(f"unsupported format {fmt}")
    v, t = reader(text, triangulate)
    mesh = TriangleMesh(v, np.array(t, dtype=np.int64).reshape(-1, 3))
    return orient_outward(mesh) if orient else mesh


def save_mesh(mesh: TriangleMesh, path, format=None):
    fmt = _format_of(path, format)
    out = []
    if fmt == "OFF":
        out.append("OFF")
        out.append(f"{mesh.n_vertices} {mesh.n_triangles} 0")
        out.extend(" ".join(f"{x:.17g}" for x in v) for v in mesh.vertices)
        out.extend("3 " + " ".join(str(i) for i in t) for t in mesh.triangles)
    elif fmt == "OBJ":
        out.extend("v " + " ".join(f"{x:.17g}" for x in v) for v in mesh.vertices)
        out.extend("f " + " ".join(str(i + 1) for i in t) for t in mesh.triangles)
    else:
        raise ParseError(f"unsupported format {fmt}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- repair & perturbation


def repair_mesh(mesh: TriangleMesh, merge_tolerance_factor: float = 1e-2) -> TriangleMesh:
    """Merge near-coincident vertices and drop duplicate or degenerate triangles.

    Vertices closer than ``merge_tolerance_factor * mean_edge_length`` are
    merged (transitively); the lowest-indexed vertex of each group keeps its
    position. Triangles that collapse, repeat an existing vertex set, or have
    zero area are removed, and unreferenced vertices are dropped.
    """
    delta = merge_tolerance_factor * mesh.mean_edge_length
    n = mesh.n_vertices
    v = np.asarray(mesh.vertices)
    if delta > 0 and n:
        pairs = cKDTree(v).query_pairs(delta, output_type="ndarray")
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    if len(pairs):
        graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, labels = csgraph.connected_components(graph, directed=False)
        rep = np.full(labels.max() + 1, n, dtype=np.int64)
        np.minimum.at(rep, labels, np.arange(n))
        target = rep[labels]
    else:
        target = np.arange(n)
    t = target[mesh.triangles]
    ok = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    t = t[ok]
    _, first = np.unique(np.sort(t, axis=1), axis=0, return_index=True)
    t = t[np.sort(first)]
    cand = TriangleMesh(v, t)
    scale = max(mesh.mean_edge_length, np.finfo(float).tiny) ** 2
    cand = TriangleMesh(v, t[cand.areas > 1e-14 * scale])
    if cand.n_triangles == 0:
        raise EmptyMesh("repair removed every triangle")
    out, _ = cand.compacted()
    if out.n_vertices == mesh.n_vertices and np.array_equal(out.triangles, mesh.triangles):
        return mesh
    return out


def perturb_mesh(mesh: TriangleMesh, noise_amplitude: float, seed: int = 0) -> TriangleMesh:
    """Displace each vertex by a uniform random vector in a ball of radius ``noise_amplitude * L̄``."""
    if noise_amplitude < 0:
        raise ValueError("noise amplitude must be non-negative")
    if noise_amplitude == 0:
        return TriangleMesh(mesh.vertices, mesh.triangles)
    rng = np.random.default_rng(seed)
    n = mesh.n_vertices
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = noise_amplitude * mesh.mean_edge_length * rng.random(n) ** (1.0 / 3.0)
    return TriangleMesh(mesh.vertices + d * radius[:, None], mesh.triangles)


def remove_random_triangles(mesh: TriangleMesh, fraction: float, seed: int = 0) -> TriangleMesh:
    """Delete ``floor(fraction * m)`` uniformly chosen triangles and drop orphaned vertices."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    m = mesh.n_triangles
    count = int(np.floor(fraction * m))
    if count == 0:
        return mesh
    rng = np.random.default_rng(seed)
    keep = np.ones(m, dtype=bool)
    keep[rng.choice(m, size=count, replace=False)] = False
    return mesh.submesh(keep)


# ---------------------------------------------------------------- tetrahedral meshes


class TetMesh:
    """Tetrahedral volume mesh with its boundary/interior vertex split.

    Boundary faces are the faces that belong to exactly one tetrahedron.
    """

    def __init__(self, vertices, tets):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshIndexError("tet references a vertex outside the vertex array")
        self.vertices = _readonly(v)
        self.tets = _readonly(t)

    def __repr__(self):
        return (
            f"TetMesh(n_vertices={len(self.vertices)}, n_tets={len(self.tets)}, "
            f"n_boundary={len(self.boundary_vertices)})"
        )

    @cached_property
    def volumes(self):
        p = self.vertices[self.tets]
        return _readonly(
            np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0
        )

    @cached_property
    def boundary_faces(self):
        """Faces in exactly one tet, wound so their normal points out of that tet."""
        t = self.tets
        # each face listed opposite to one tet corner; this winding is outward for positive tets
        faces = np.concatenate([t[:, [1, 2, 3]], t[:, [0, 3, 2]], t[:, [0, 1, 3]], t[:, [0, 2, 1]]])
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        single = counts[inv.ravel()] == 1
        out = faces[single]
        sign = np.tile(np.sign(self.volumes), 4)[single]
        out[sign < 0] = out[sign < 0][:, ::-1]
        return _readonly(out)

    @cached_property
    def boundary_vertices(self):
        return _readonly(np.unique(self.boundary_faces))

    @cached_property
    def interior_vertices(self):
        mask = np.ones(len(self.vertices), dtype=bool)
        mask[self.boundary_vertices] = False
        return _readonly(np.flatnonzero(mask))

    def boundary_surface(self) -> TriangleMesh:
        """Boundary as a compact triangle mesh; vertex ``k`` is tet vertex ``boundary_vertices[k]``."""
        b = self.boundary_vertices
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[b] = np.arange(len(b))
        return TriangleMesh(self.vertices[b], remap[self.boundary_faces])

    def check_orientation(self):
        bad = np.flatnonzero(self.volumes <= 0)
        if len(bad):
            raise InvertedTet(f"{len(bad)} tets with non-positive volume (first: {bad[0]})")


def load_tet_mesh(path) -> TetMesh:
    """Read the node/element text format written by :func:`save_tet_mesh`.

    Layout::

        nodes N
        x y z          (N lines)
        tets M
        a b c d        (M lines, 0-based)
    """
    lines = list(_data_lines(Path(path).read_text()))
    try:
        head = lines[0].split()
        if head[0].lower() != "nodes":
            raise ParseError("expected 'nodes N' header")
        nv = int(head[1])
        verts = [[float(x) for x in lines[1 + i].split()] for i in range(nv)]
        head = lines[1 + nv].split()
        if head[0].lower() != "tets":
            raise ParseError("expected 'tets M' header")
        nt = int(head[1])
        tets = [[int(x) for x in lines[2 + nv + i].split()] for i in range(nt)]
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed tet mesh: {exc}") from exc
    if any(len(x) != 3 for x in verts) or any(len(x) != 4 for x in tets):
        raise ParseError("wrong number of fields in node or tet line")
    return TetMesh(verts, tets)


def save_tet_mesh(tet: TetMesh, path):
    out = [f"nodes {len(tet.vertices)}"]
    out.extend(" ".join(f"{x:.17g}" for x in v) for v in tet.vertices)
    out.append(f"tets {len(tet.tets)}")
    out.extend(" ".join(str(i) for i in t) for t in tet.tets)
    Path(path).write_text("\n".join(out) + "\n")
