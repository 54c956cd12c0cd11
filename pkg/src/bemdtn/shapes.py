"""Procedural test shapes: spheres, boxes, disks, bumpy cubes, sheets and tet balls."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import TetMesh, TriangleMesh, orient_outward


def _subdivide(vertices, triangles, project):
    verts = list(map(tuple, vertices))
    cache = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
            if project:
                p = p / np.linalg.norm(p)
            cache[key] = len(verts)
            verts.append(tuple(p))
        return cache[key]

    out = []
    for a, b, c in triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out)


def icosphere(subdivisions=3, radius=1.0) -> TriangleMesh:
    """Subdivided icosahedron with vertices on the sphere (642 vertices at 3 subdivisions)."""
    p = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    t = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    for _ in range(subdivisions):
        v, t = _subdivide(v, t, project=True)
    return orient_outward(TriangleMesh(v * radius, t))


def octasphere(subdivisions=3, radius=1.0) -> TriangleMesh:
    """Subdivided octahedron on the sphere (258 vertices at 3, 1026 at 4 subdivisions)."""
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    t = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    for _ in range(subdivisions):
        v, t = _subdivide(v, t, project=True)
    return orient_outward(TriangleMesh(v * radius, t))


def _grid_patch(n, origin, du, dv, height=None):
    """Triangulated (n+1)^2 grid over origin + s*du + t*dv; optional normal offset function."""
    s, t = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1), indexing="ij")
    s, t = s.ravel(), t.ravel()
    pts = origin + s[:, None] * du + t[:, None] * dv
    if height is not None:
        nrm = np.cross(du, dv)
        nrm = nrm / np.linalg.norm(nrm)
        pts = pts + height(s, t)[:, None] * nrm
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    # alternate the diagonal so the grid is symmetric under reflections
    flip = ((np.arange(n)[:, None] + np.arange(n)[None, :]) % 2).ravel().astype(bool)
    t1 = np.where(flip[:, None], np.stack([a, b, d], 1), np.stack([a, b, c], 1))
    t2 = np.where(flip[:, None], np.stack([b, c, d], 1), np.stack([a, c, d], 1))
    return pts, np.concatenate([t1, t2])


def _weld(patches, tol=1e-9):
    verts, tris, off = [], [], 0
    for p, t in patches:
        verts.append(p)
        tris.append(t + off)
        off += len(p)
    v = np.concatenate(verts)
    t = np.concatenate(tris)
    key = np.round(v / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return TriangleMesh(v[first[order]], rank[inv.ravel()][t])


def box(n=8, size=(1.0, 1.0, 1.0), heights=None) -> TriangleMesh:
    """Axis-aligned box ``[0, sx] x [0, sy] x [0, sz]`` with an n x n grid per face.

    ``heights`` optionally maps face index -> callable(s, t) giving an outward
    displacement of interior grid points (used for the bumpy cubes).
    """
    sx, sy, sz = size
    X, Y, Z = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    o = np.zeros(3)
    faces = [
        (o, Y, X), (Z, X, Y),  # z = 0 (down), z = sz (up)
        (o, X, Z), (Y, Z, X),  # y = 0, y = sy
        (o, Z, Y), (X, Y, Z),  # x = 0, x = sx
    ]
    patches = []
    for k, (org, du, dv) in enumerate(faces):
        h = None if heights is None else heights.get(k)
        patches.append(_grid_patch(n, org, du, dv, h))
    return orient_outward(_weld(patches))


def cube(n=1) -> TriangleMesh:
    """Unit cube; ``n=1`` gives the 12-triangle cube."""
    return box(n)


def bumpy_cube(n=12, height=0.25, radius=0.35, outward=True) -> TriangleMesh:
    """Unit cube with one smooth bump on every face, pointing out or in.

    The inward and outward variants are exact reflections of each other on
    every face, so their boundaries are isometric.
    """
    sign = 1.0 if outward else -1.0

    def bump(s, t):
        r = np.hypot(s - 0.5, t - 0.5) / radius
        return np.where(r < 1, sign * height * np.cos(np.minimum(r, 1) * np.pi / 2) ** 2, 0.0)

    return box(n, heights={k: bump for k in range(6)})


def flat_disk(radius=1.0, thickness=0.1, n_boundary=48, n_rim=2) -> TriangleMesh:
    """Closed pancake: two Delaunay-triangulated disks joined by a cylindrical rim band.

    Interior rings carry a number of points proportional to their radius so
    triangles stay close to equilateral.
    """
    h = 2 * np.pi * radius / n_boundary
    n_rings = max(1, int(round(radius / h)))
    pts2 = [np.zeros((1, 2))]
    for i in range(1, n_rings):
        r = radius * i / n_rings
        cnt = max(6, int(round(n_boundary * i / n_rings)))
        a = np.linspace(0, 2 * np.pi, cnt, endpoint=False) + (np.pi / cnt) * (i % 2)
        pts2.append(r * np.stack([np.cos(a), np.sin(a)], 1))
    a = np.linspace(0, 2 * np.pi, n_boundary, endpoint=False)
    ring = radius * np.stack([np.cos(a), np.sin(a)], 1)
    n_in = sum(len(p) for p in pts2)
    pts2 = np.concatenate(pts2 + [ring])
    tri2 = Delaunay(pts2).simplices
    # orient counter-clockwise in the plane
    p = pts2[tri2]
    cr = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tri2[cr < 0] = tri2[cr < 0][:, ::-1]

    zs = np.linspace(thickness / 2, -thickness / 2, n_rim + 1)
    n2 = len(pts2)
    top = np.column_stack([pts2, np.full(n2, zs[0])])
    bottom_inner = np.column_stack([pts2[:n_in], np.full(n_in, zs[-1])])
    rim_rings = [np.column_stack([ring, np.full(n_boundary, z)]) for z in zs[1:]]
    verts = np.concatenate([top, bottom_inner] + rim_rings)

    ring_ids = [n_in + np.arange(n_boundary)]
    base = n2 + n_in
    for j in range(n_rim):
        ring_ids.append(base + j * n_boundary + np.arange(n_boundary))
    bot_map = np.concatenate([n2 + np.arange(n_in), ring_ids[-1]])

    tris = [tri2, bot_map[tri2][:, ::-1]]
    for r0, r1 in zip(ring_ids[:-1], ring_ids[1:]):
        a0, b0 = r0, np.roll(r0, -1)
        a1, b1 = r1, np.roll(r1, -1)
        tris.append(np.stack([a0, a1, b1], 1))
        tris.append(np.stack([a0, b1, b0], 1))
    mesh = TriangleMesh(verts, np.concatenate(tris))
    return orient_outward(_consistent_winding(mesh))


def _consistent_winding(mesh: TriangleMesh) -> TriangleMesh:
    """Make adjacent triangles agree on orientation (breadth-first over edges)."""
    t = np.array(mesh.triangles)
    m = len(t)
    edge_map = {}
    for f in range(m):
        for k in range(3):
            a, b = t[f, k], t[f, (k + 1) % 3]
            edge_map.setdefault((min(a, b), max(a, b)), []).append(f)
    seen = np.zeros(m, dtype=bool)
    for start in range(m):
        if seen[start]:
            continue
        seen[start] = True
        queue = [start]
        while queue:
            f = queue.pop()
            for k in range(3):
                a, b = t[f, k], t[f, (k + 1) % 3]
                for g in edge_map[(min(a, b), max(a, b))]:
                    if seen[g]:
                        continue
                    # neighbour must traverse the shared edge as (b, a)
                    gk = [(t[g, j], t[g, (j + 1) % 3]) for j in range(3)]
                    if (a, b) in gk:
                        t[g] = t[g][::-1]
                    seen[g] = True
                    queue.append(g)
    return TriangleMesh(mesh.vertices, t)


def hemisphere(subdivisions=3, radius=1.0, cut=0.0) -> TriangleMesh:
    """Open cap of an icosphere: triangles whose centroid lies below ``z = cut``."""
    s = icosphere(subdivisions, radius)
    return s.submesh(s.centroids[:, 2] < cut * radius)


def sheet(n=12, size=1.0, bend=0.0) -> TriangleMesh:
    """Square open sheet in the xy-plane, optionally folded along ``x = size/2``.

    ``bend`` is the fold angle in radians; each half rotates by ``bend/2``
    about the crease line, so the sheet stays isometric to the flat one.
    """
    pts, tris = _grid_patch(n, np.zeros(3), np.array([size, 0, 0.0]), np.array([0, size, 0.0]))
    if bend:
        x = pts[:, 0] - size / 2
        phi = np.sign(x) * bend / 2
        r = np.abs(x)
        pts = np.stack([size / 2 + np.sign(x) * r * np.cos(phi), pts[:, 1], r * np.sin(np.abs(phi))], 1)
    return TriangleMesh(pts, tris)


def two_spheres(subdivisions=2, separation=3.0) -> TriangleMesh:
    a = icosphere(subdivisions)
    v = np.concatenate([a.vertices, a.vertices + [separation, 0, 0]])
    t = np.concatenate([a.triangles, a.triangles + a.n_vertices])
    return TriangleMesh(v, t)


def horseshoe(subdivisions=3, length=3.0, thickness=0.4, bend_radius=1.2, opening=0.12) -> TriangleMesh:
    """Prolate ellipsoid bent around the z axis so its two tips nearly meet.

    The tips sit at angles ``+-(1 - opening) pi``; they are close in space but
    far apart along the surface, like two limbs.
    """
    s = icosphere(subdivisions)
    v = s.vertices * [length, thickness, thickness]
    th = (1.0 - opening) * np.pi / length * v[:, 0]
    r = bend_radius - v[:, 1]
    return orient_outward(TriangleMesh(np.c_[r * np.cos(th), r * np.sin(th), v[:, 2]], s.triangles))


def ball_tet_mesh(surface_subdivisions=3, shells=None, seed=0) -> TetMesh:
    """Delaunay tetrahedralization of a unit ball from concentric sphere shells.

    ``shells`` is a list of ``(radius, icosphere_subdivisions)``; each shell is
    randomly rotated to avoid co-spherical degeneracies with its neighbours.
    The boundary is the ``surface_subdivisions`` icosphere.
    """
    if shells is None:
        shells = [(0.88, 3), (0.76, 3), (0.64, 3), (0.52, 2), (0.40, 2), (0.28, 1), (0.16, 0)]
    rng = np.random.default_rng(seed)
    pts = [icosphere(surface_subdivisions).vertices]
    for r, sub in shells:
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        pts.append(r * icosphere(sub).vertices @ q.T)
    pts.append(np.zeros((1, 3)))
    pts = np.concatenate(pts)
    tets = Delaunay(pts).simplices.astype(np.int64)
    p = pts[tets]
    vol = np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))
    tets[vol < 0] = tets[vol < 0][:, [0, 2, 1, 3]]
    keep = np.abs(vol) > 1e-12
    return TetMesh(pts, tets[keep])
