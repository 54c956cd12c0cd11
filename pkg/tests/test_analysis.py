import warnings

import numpy as np
import pytest

from bemdtn.analysis import (
    TruncatedSpectrum,
    bisteklov_distance,
    correspondence_matrix,
    default_time_grid,
    diffusion_distance,
    functional_map,
    heat_kernel,
    heat_kernel_matrix,
    hks,
    pca_embed,
    pointwise_distortion,
    segment,
    shape_difference,
    shape_dna,
    spectral_embedding,
    wks,
    wks_weights,
    ShapeDifference,
)
from bemdtn.errors import DegenerateVolume, RankDeficiencyWarning, SingularGram
from bemdtn.intrinsic import cotan_laplacian, laplace_eigs
from bemdtn.mesh import perturb_mesh, transform_mesh
from bemdtn.operators import lumped_mass
from bemdtn.shapes import bumpy_cube, cube, horseshoe, icosphere, sheet, two_spheres
from bemdtn.steklov import build_dtn, open_surface_dtn, steklov_eigs


def _spec(mesh, k, tol=1e-6, seed=0):
    dtn = build_dtn(mesh)
    return TruncatedSpectrum.from_steklov(steklov_eigs(dtn, k, tol=tol, seed=seed), dtn.ops.M)


def _rotation(a, b, c):
    def rx(t):
        return np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])

    def rz(t):
        return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])

    return rz(a) @ rx(b) @ rz(c)


@pytest.fixture(scope="module")
def S3(sphere_spectrum, ops3):
    return TruncatedSpectrum.from_steklov(sphere_spectrum, ops3.M)


@pytest.fixture(scope="module")
def S16(sphere16_spectrum, ops2):
    return TruncatedSpectrum.from_steklov(sphere16_spectrum, ops2.M)


@pytest.fixture(scope="module")
def rotated3(ico3):
    """Rotated copy of the 642-vertex icosphere and its spectrum (identity correspondence)."""
    m = transform_mesh(ico3, rotation=_rotation(0.3, 0.5, 0.7), translation=[0.2, -0.1, 0.4])
    return m, _spec(m, 17, seed=1)


@pytest.fixture(scope="module")
def bumpy_pair():
    out = {}
    for outward in (True, False):
        m = bumpy_cube(12, 0.25, 0.35, outward)
        S = _spec(m, 30)
        w, U = laplace_eigs(m, 30)
        L = TruncatedSpectrum(w, U, S.M, "laplace")
        c = np.full(3, 0.5)
        h = 0.25 if outward else -0.25
        apex = []
        for ax in range(3):
            for side in (0, 1):
                p = c.copy()
                p[ax] = side + (h if side else -h)
                apex.append(int(np.argmin(np.linalg.norm(m.vertices - p, axis=1))))
        out[outward] = (m, S, L, apex)
    return out


# ---------------------------------------------------------------- spectrum container


def test_truncated_spectrum_basics(S3):
    assert S3.k == 17 and S3.n_zero == 1
    lam, phi = S3.nonzero()
    assert len(lam) == 16 and phi.shape == (642, 16)
    assert S3.truncated(4).k == 4
    with pytest.raises(ValueError):
        TruncatedSpectrum([1.0, 0.5], np.eye(2), S3.M)


# ---------------------------------------------------------------- heat kernel


def test_heat_kernel_long_time_limit(S3, ico3):
    lam = S3.eigenvalues
    area = S3.M.sum()
    assert heat_kernel(S3, 100 / lam[1], 0, 300) == pytest.approx(1 / area, abs=1e-6)


def test_heat_kernel_symmetry(S3):
    t = 0.3
    assert heat_kernel(S3, t, 3, 97) == heat_kernel(S3, t, 97, 3)
    with pytest.raises(ValueError):
        heat_kernel(S3, 0.0, 0, 1)


def test_chapman_kolmogorov(S3, ico3):
    t = 1 / S3.eigenvalues[5]
    Ml = lumped_mass(ico3).diagonal()
    K = heat_kernel_matrix(S3, t)
    lhs = (K * Ml) @ K
    rhs = heat_kernel_matrix(S3, 2 * t)
    assert np.abs(lhs - rhs).max() <= 0.05 * np.abs(rhs).max()


# ---------------------------------------------------------------- signatures


def test_hks_sphere_constant_and_positive(S3):
    tab = hks(S3)
    assert tab.values.shape == (642, 100)
    assert np.all(tab.values > 0) and np.all(np.isfinite(tab.values))
    spread = tab.values.max(axis=0) / tab.values.min(axis=0) - 1
    assert spread.max() < 0.02
    # decreasing in t beyond 1/lambda_1
    late = hks(S3, times=np.linspace(1 / S3.eigenvalues[1], 10 / S3.eigenvalues[1], 20)).values
    assert np.all(np.diff(late, axis=1) < 0)


def test_hks_default_grid_and_note(S3):
    g = default_time_grid(S3)
    lam = S3.eigenvalues
    assert g[0] == pytest.approx(4 * np.log(10) / lam[-1])
    assert g[-1] == pytest.approx(4 * np.log(10) / lam[1])
    assert "note" in hks(S3).meta
    with pytest.raises(ValueError):
        hks(S3, times=[-1.0])


def test_hks_scaled_has_unit_mean(S3):
    tab = hks(S3, scaled=True, num=5)
    mass = np.asarray(S3.M.sum(axis=1)).ravel()
    assert np.allclose(mass @ tab.values / mass.sum(), 1.0, rtol=1e-12)


def test_wks_weights_normalized(S16):
    e = np.linspace(-1, 2, 30)
    W = wks_weights(S16, e, 0.2)
    assert np.allclose(W.sum(axis=0), 1.0, rtol=1e-12)


def test_wks_sphere_constant(S3):
    # complete eigenspaces only: degrees 0..3 fill the first 16 pairs
    S = S3.truncated(16)
    tab = wks(S)
    assert np.all(tab.values > 0)
    spread = tab.values.max(axis=0) / tab.values.min(axis=0) - 1
    assert spread.max() < 0.02
    with pytest.raises(ValueError):
        wks(S, sigma=-1.0)


def test_wks_default_sigma(S16):
    tab = wks(S16, num=11)
    step = tab.grid[1] - tab.grid[0]
    assert tab.meta["sigma"] == pytest.approx(7 * step)


def _apex_separation(pair, idx, fn):
    A = fn(pair[True][idx])[pair[True][3]]
    B = fn(pair[False][idx])[pair[False][3]]
    noise = max(np.abs(A - A.mean(0)).max(), np.abs(B - B.mean(0)).max())
    sep = np.abs(A.mean(0) - B.mean(0)).max()
    return sep, noise


@pytest.mark.parametrize("kind", ["hks", "wks"])
def test_bumpy_cubes_steklov_separates(bumpy_pair, kind):
    fn = (lambda s: hks(s, scaled=True).values) if kind == "hks" else (lambda s: wks(s).values)
    m_out, m_in = bumpy_pair[True][0], bumpy_pair[False][0]
    # the boundaries are isometric: identical edge lengths
    e = m_out.edges
    assert np.allclose(
        np.linalg.norm(m_out.vertices[e[:, 0]] - m_out.vertices[e[:, 1]], axis=1),
        np.linalg.norm(m_in.vertices[e[:, 0]] - m_in.vertices[e[:, 1]], axis=1),
    )
    sep_s, noise_s = _apex_separation(bumpy_pair, 1, fn)
    sep_l, noise_l = _apex_separation(bumpy_pair, 2, fn)
    assert sep_s > 10 * noise_s
    assert sep_l <= max(noise_l, 1e-10)


# ---------------------------------------------------------------- distances


def test_distances_zero_at_self(S3):
    assert diffusion_distance(S3, 0.5, 10, [10])[0] == 0.0
    assert bisteklov_distance(S3, 10, [10])[0] == 0.0


def test_distance_symmetry_and_triangle(S3, rng):
    for _ in range(20):
        x, y, z = rng.choice(642, 3, replace=False)
        for d in (lambda a, b: diffusion_distance(S3, 0.2, a, [b])[0], lambda a, b: bisteklov_distance(S3, a, [b])[0]):
            assert d(x, y) == pytest.approx(d(y, x), rel=1e-12)
            assert d(x, z) <= d(x, y) + d(y, z) + 1e-12


def test_bisteklov_monotone_truncation(S3):
    ys = np.arange(0, 642, 7)
    prev = np.zeros(len(ys))
    for k in range(2, 18):
        cur = bisteklov_distance(S3.truncated(k), 0, ys)
        assert np.all(cur >= prev - 1e-14)
        prev = cur


@pytest.mark.slow
def test_horseshoe_tips_far_in_bisteklov():
    m = horseshoe(3)
    S = _spec(m, 20)
    ang = np.arctan2(m.vertices[:, 1], m.vertices[:, 0])
    a, b = int(np.argmax(ang)), int(np.argmin(ang))
    eu = np.linalg.norm(m.vertices - m.vertices[a], axis=1)
    db = bisteklov_distance(S, a, np.arange(m.n_vertices))
    # tips are spatially close yet the other tip is the d_B-farthest vertex
    assert np.sum(eu < eu[b]) < 0.2 * m.n_vertices
    assert np.argmax(db) == b


# ---------------------------------------------------------------- embedding and segmentation


def test_embedding_self_consistency(S3):
    X = spectral_embedding(S3, 10)
    lam, phi = S3.nonzero()
    x, y = 5, 400
    direct = np.sum((phi[x, :10] - phi[y, :10]) ** 2 / lam[:10])
    assert np.sum((X[x] - X[y]) ** 2) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValueError):
        spectral_embedding(S3, 40)


def test_embedding_rigid_motion_subspaces(S3, rotated3):
    _, R = rotated3
    assert np.allclose(R.eigenvalues, S3.eigenvalues, rtol=1e-6, atol=1e-9)
    # compare eigenspace projectors (principal angles all zero)
    for a, b in [(1, 4), (4, 9), (9, 16)]:
        PA = S3.phi[:, a:b] @ (S3.phi[:, a:b].T @ S3.M)
        PB = R.phi[:, a:b] @ (R.phi[:, a:b].T @ R.M)
        assert np.abs(PA - PB).max() < 1e-6


@pytest.fixture(scope="module")
def two_sphere_spec():
    m = two_spheres(2)
    return m, _spec(m, 10)


def test_two_spheres_embedding_and_segment(two_sphere_spec):
    m, S = two_sphere_spec
    assert S.n_zero == 2
    comp = m.components
    X = spectral_embedding(S)
    assert len(set(np.sign(X[comp == 0, 0]))) == 1
    assert np.sign(X[comp == 0, 0][0]) != np.sign(X[comp == 1, 0][0])
    labels = segment(m, S, 2, seed=0)
    assert np.array_equal(labels, comp) or np.array_equal(labels, 1 - comp)
    assert not np.any(segment(m, S, 1))


def test_segment_deterministic_and_seed_free_objective(two_sphere_spec):
    m, S = two_sphere_spec
    a = segment(m, S, 2, seed=5)
    assert np.array_equal(a, segment(m, S, 2, seed=5))
    inertias = [segment(m, S, 2, seed=s, return_inertia=True)[1] for s in (0, 1, 2)]
    assert np.ptp(inertias) <= 1e-9 * max(inertias)
    with pytest.raises(ValueError):
        segment(m, S, 0)


# ---------------------------------------------------------------- functional maps and shape differences


def test_functional_map_identity(S3):
    F = functional_map(S3, S3, np.arange(642))
    assert np.abs(F - np.eye(17)).max() < 1e-8


def test_functional_map_rotated_pair(S3, rotated3):
    _, R = rotated3
    c = np.arange(642)
    F = functional_map(S3, R, c)
    assert np.abs(F[:, 0] - np.eye(17)[:, 0]).max() < 1e-6
    Fb = functional_map(R, S3, c)
    assert np.abs(Fb @ F - np.eye(17)).max() < 0.05


def test_functional_map_reordered_vertices(ico2, S16, rng):
    perm = rng.permutation(ico2.n_vertices)
    inv = np.argsort(perm)
    # target vertex j is source vertex perm[j]
    S = TruncatedSpectrum(S16.eigenvalues, S16.phi[perm], S16.M[perm][:, perm])
    F = functional_map(S16, S, inv)
    assert np.abs(F - np.eye(16)).max() < 1e-8


def test_functional_map_rank_warning(S3):
    with pytest.warns(RankDeficiencyWarning):
        functional_map(S3, S3, np.zeros(642, dtype=int))


def test_correspondence_matrix_errors():
    with pytest.raises(ValueError):
        correspondence_matrix([0, 1], 3, 3)
    with pytest.raises(IndexError):
        correspondence_matrix([0, 1, 5], 3, 3)
    P = correspondence_matrix([0, 0, 1], 3, 2).toarray()
    assert np.allclose(P, [[0.5, 0.5, 0], [0, 0, 1]])


@pytest.mark.parametrize("base", ["area", "steklov"])
def test_shape_difference_identity(S3, base):
    sd = shape_difference(S3, S3, np.eye(17), base)
    assert np.abs(sd.D - np.eye(sd.D.shape[0])).max() < 1e-6
    assert np.allclose(pointwise_distortion(sd, S3), 1.0, atol=1e-8)


def test_shape_difference_rotated_pair(S3, rotated3):
    _, R = rotated3
    F = functional_map(S3, R, np.arange(642))
    sd = shape_difference(S3, R, F)
    assert np.abs(pointwise_distortion(sd, S3) - 1).max() < 0.05


def test_distortion_linear_in_d(S3):
    G = np.diag(S3.eigenvalues[1:])
    sd = ShapeDifference(2 * np.eye(16), np.eye(17), "steklov", G, 1)
    assert np.allclose(pointwise_distortion(sd, S3), 0.5, rtol=1e-12)


def test_shape_difference_errors(S3):
    with pytest.raises(ValueError):
        shape_difference(S3, S3, np.eye(5))
    with pytest.raises(ValueError):
        shape_difference(S3, S3, np.eye(17), base="conformal")
    zero = TruncatedSpectrum(np.zeros(3), S3.phi[:, :3], S3.M)
    with pytest.raises(SingularGram):
        shape_difference(zero, zero, np.eye(3), base="steklov")


def test_shape_difference_target_scaling(ico2, S16):
    """Scaling the target by s multiplies D by s for M-orthonormal bases."""
    s = 2.0
    n = ico2.n_vertices
    target = perturb_mesh(ico2, 0.05, seed=2)
    T1 = _spec(target, 16, tol=1e-8)
    T2 = _spec(transform_mesh(target, scale=s), 16, tol=1e-8)
    c = np.arange(n)
    sd1 = shape_difference(S16, T1, functional_map(S16, T1, c))
    sd2 = shape_difference(S16, T2, functional_map(S16, T2, c))
    assert np.abs(sd2.D - s * sd1.D).max() <= 1e-3 * np.abs(sd1.D).max() * s
    d1 = np.abs(np.log(pointwise_distortion(sd1, S16)))
    d2 = pointwise_distortion(sd2, S16)
    assert np.argmax(d1) == np.argmax(np.abs(np.log(d2 * s)))


@pytest.fixture(scope="module")
def sheet_distortion():
    a, b = sheet(12), sheet(12, bend=np.pi / 2)
    da, db = open_surface_dtn(a), open_surface_dtn(b)
    A = TruncatedSpectrum.from_steklov(steklov_eigs(da, 20), da.ops.M)
    B = TruncatedSpectrum.from_steklov(steklov_eigs(db, 20), db.ops.M)
    F = functional_map(A, B, np.arange(a.n_vertices))
    out = {}
    for base in ("steklov", "conformal"):
        kw = {} if base == "steklov" else dict(L_M=cotan_laplacian(a).L, L_N=cotan_laplacian(b).L)
        out[base] = pointwise_distortion(shape_difference(A, B, F, base, **kw), A)
    return a, out


def test_sheet_crease_distortion(sheet_distortion):
    a, d = sheet_distortion
    crease = np.isclose(a.vertices[:, 0], 0.5)
    ste = np.abs(np.log(d["steklov"]))
    assert crease[np.argmax(ste)]
    rel = {k: v.std() / v.mean() for k, v in d.items()}
    assert rel["conformal"] < 0.05
    assert rel["steklov"] > 2 * rel["conformal"]


# ---------------------------------------------------------------- invariances


def test_sign_flip_invariance(S3, rng):
    flips = rng.choice([-1.0, 1.0], 17)
    F = TruncatedSpectrum(S3.eigenvalues, S3.phi * flips, S3.M)
    assert np.allclose(hks(S3).values, hks(F).values, rtol=1e-12)
    assert np.allclose(wks(S3).values, wks(F).values, rtol=1e-12)
    ys = np.arange(642)
    assert np.allclose(diffusion_distance(S3, 0.3, 4, ys), diffusion_distance(F, 0.3, 4, ys), rtol=1e-12, atol=1e-15)
    assert np.allclose(bisteklov_distance(S3, 4, ys), bisteklov_distance(F, 4, ys), rtol=1e-12, atol=1e-15)


def test_descriptors_rigid_and_reordering_invariance(ico2, rng):
    m = perturb_mesh(ico2, 0.05, seed=4)
    perm = rng.permutation(m.n_vertices)
    inv = np.argsort(perm)
    moved = transform_mesh(m, rotation=_rotation(1.0, 0.4, -0.3), translation=[1, 2, 3])
    from bemdtn.mesh import TriangleMesh

    moved = TriangleMesh(moved.vertices[perm], inv[moved.triangles])
    A = _spec(m, 16, tol=1e-9)
    B = _spec(moved, 16, tol=1e-9)
    times = default_time_grid(A, 20)
    ha, hb = hks(A, times).values, hks(B, times).values[inv]
    assert np.abs(ha - hb).max() <= 1e-6 * np.abs(ha).max()
    ys = np.arange(m.n_vertices)
    da = bisteklov_distance(A, 0, ys)
    db = bisteklov_distance(B, inv[0], inv[ys])
    assert np.abs(da - db).max() <= 1e-6 * da.max()


# ---------------------------------------------------------------- ShapeDNA and PCA


def test_shape_dna_scaling(ico2, S16):
    big = _spec(transform_mesh(ico2, scale=2.0), 16)
    a = shape_dna(S16, 16)
    b = shape_dna(big, 16)
    assert np.allclose(b[1:], a[1:] / 2, rtol=1e-3)
    na = shape_dna(S16, 16, normalize=True, mesh=ico2)
    nb = shape_dna(big, 16, normalize=True, mesh=transform_mesh(ico2, scale=2.0))
    assert np.allclose(na[1:], nb[1:], rtol=1e-3)
    with pytest.raises(ValueError):
        shape_dna(S16, 40)
    with pytest.raises(ValueError):
        shape_dna(S16, 4, normalize=True)


def test_shape_dna_degenerate_volume(S16):
    with pytest.raises(DegenerateVolume):
        shape_dna(S16, 4, normalize=True, mesh=sheet(4))


@pytest.mark.slow
def test_shape_dna_growth_bound(ico2, S16):
    i = np.arange(1, 16)
    # c fitted on the sphere, then checked on the rest of the family
    c = np.max(shape_dna(S16, 16, True, ico2)[1:] / i ** (2 / 3))
    for m in (cube(6), bumpy_cube(8), horseshoe(2)):
        v = shape_dna(_spec(m, 16), 16, True, m)[1:]
        assert np.all(v <= c * i ** (2 / 3))


def test_pca_two_points():
    a, b = np.array([0.0, 0, 0]), np.array([3.0, 4, 0])
    X = pca_embed([a, b], dims=1)
    assert np.allclose(np.sort(X[:, 0]), [-2.5, 2.5])


def test_pca_duplicates_and_distances(rng):
    X = pca_embed(np.tile([1.0, 2.0, 3.0], (4, 1)), dims=2)
    assert np.allclose(X, 0)
    V = rng.standard_normal((5, 3))
    Y = pca_embed(V, dims=3)
    dv = np.linalg.norm(V[:, None] - V[None], axis=2)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=2)
    assert np.allclose(dv, dy)
    with pytest.raises(ValueError):
        pca_embed([[1.0, 2.0]])
