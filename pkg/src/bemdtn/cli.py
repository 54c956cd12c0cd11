"""Command-line batch runs: spectra, descriptors, distances, FEM comparison, shape differences.

Exit codes: 0 success, 1 usage, 2 I/O or parse failure, 3 non-convergence,
4 inconsistent inputs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from threadpoolctl import threadpool_limits

from . import analysis
from .errors import BemDtnError, NoConvergence, NotConverged, ParseError
from .intrinsic import cotan_laplacian, fem_dtn_schur, fem_steklov_eigs, laplace_eigs
from .mesh import isoperimetric_scale, load_mesh, load_tet_mesh, repair_mesh
from .operators import AssemblyConfig, mass_matrix, write_matrices
from .steklov import build_dtn, steklov_eigs

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NOCONV, EXIT_INCONSISTENT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class Inconsistent(Exception):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report or {}


@dataclass
class RunConfig:
    command: str
    inputs: list
    num_eigs: int = 20
    quad_order: int = 4
    eps: float = 0.0
    tol: float = 1e-6
    max_iter: int = 100
    seed: int = 0
    out_dir: str = "."
    normalize: bool = False
    repair: bool = False
    operator: str = "steklov"
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.num_eigs < 1:
            raise UsageError("--k must be a positive integer")
        if self.quad_order < 1:
            raise UsageError("--quad-order must be positive")
        if self.eps < 0:
            raise UsageError("--regularize must be non-negative")
        if not self.tol > 0:
            raise UsageError("--tol must be positive")
        if self.max_iter < 1:
            raise UsageError("--max-iter must be positive")
        if self.operator not in ("steklov", "laplace", "fem"):
            raise UsageError(f"unknown operator {self.operator!r}")

    def assembly(self) -> AssemblyConfig:
        q = self.quad_order
        return AssemblyConfig(singular_order=q, regular_degree=q, near_order=q, outer_degree=q, eps=self.eps)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--input", required=True, help="surface mesh (.off or .obj)")
    p.add_argument("--k", type=int, default=20, help="number of eigenpairs")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quad-order", type=int, default=4)
    p.add_argument("--regularize", type=float, nargs="?", const=1e-4, default=0.0, metavar="EPS",
                   help="kernel regularization (1e-4 when given without a value)")
    p.add_argument("--repair", action="store_true", help="run mesh repair before assembly")
    p.add_argument("--normalize", action="store_true", help="also report eigenvalues times the isoperimetric scale")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--operator", choices=("steklov", "laplace", "fem"), default="steklov")
    p.add_argument("--tet", help="tetrahedral mesh (fem operator, compare-fem)")


def build_parser():
    parser = _Parser(prog="bemdtn", description="Boundary-element Steklov spectra and spectral shape analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spectrum", help="Steklov (or reference) eigenpairs")
    _common(p)

    p = sub.add_parser("descriptors", help="heat or wave kernel signatures")
    _common(p)
    p.add_argument("--kind", choices=("hks", "wks"), default="hks")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--scaled", action="store_true", help="divide each HKS column by its mesh average")
    p.add_argument("--sigma", type=float, default=None)

    p = sub.add_parser("distance", help="per-vertex distance from a source vertex")
    _common(p)
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--kind", choices=("diffusion", "bisteklov"), default="bisteklov")
    p.add_argument("--t", type=float, default=None, help="diffusion time (default 1/lambda_1)")

    p = sub.add_parser("compare-fem", help="BEM vs FEM Steklov eigenvalues on a shared boundary")
    _common(p)
    p.add_argument("--sphere", action="store_true", help="add the unit-ball column")
    p.add_argument("--lumped", action="store_true", help="lumped boundary mass for FEM")

    p = sub.add_parser("shapediff", help="shape difference between two meshes")
    _common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--correspondence", help="one target vertex index per source vertex (default identity)")
    p.add_argument("--base", choices=("area", "conformal", "steklov"), default="steklov")
    p.add_argument("--manifest", help="lines 'target [correspondence]'; PCA over their distortion fields")
    p.add_argument("--dims", type=int, default=2)
    return parser


# ---------------------------------------------------------------- helpers


def _config_from_args(args) -> RunConfig:
    inputs = [args.input]
    for name in ("tet", "target", "correspondence", "manifest"):
        if getattr(args, name, None):
            inputs.append(getattr(args, name))
    skip = {"command", "input", "k", "tol", "max_iter", "seed", "quad_order", "regularize", "repair",
            "normalize", "out_dir", "operator"}
    options = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    cfg = RunConfig(
        command=args.command, inputs=inputs, num_eigs=args.k, quad_order=args.quad_order, eps=args.regularize,
        tol=args.tol, max_iter=args.max_iter, seed=args.seed, out_dir=args.out_dir, normalize=args.normalize,
        repair=args.repair, operator=args.operator, options=options,
    )
    cfg.validate()
    return cfg


def _provenance(cfg, checksums):
    return {"config": asdict(cfg), "mesh_checksum": checksums}


def _meta_lines(cfg, checksums):
    return [json.dumps(_provenance(cfg, checksums), sort_keys=True)]


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(path, cfg):
    mesh = load_mesh(path)
    return repair_mesh(mesh) if cfg.repair else mesh


def _limit_threads():
    """Cap the BLAS pools at ``$THREADS`` (assembly itself is single-threaded)."""
    val = os.environ.get("THREADS")
    if not val:
        return contextlib.nullcontext()
    try:
        n = max(1, int(val))
    except ValueError:
        raise UsageError(f"THREADS must be an integer, got {val!r}") from None
    return threadpool_limits(limits=n)


@dataclass
class _Computed:
    spec: analysis.TruncatedSpectrum
    steklov: object = None
    report: dict = field(default_factory=dict)
    failure: Exception | None = None


def _compute_spectrum(mesh, cfg, tet_path=None) -> _Computed:
    k = cfg.num_eigs
    t0 = time.perf_counter()
    if cfg.operator == "steklov":
        t_a = time.perf_counter()
        dtn = build_dtn(mesh, cfg.assembly())
        t_asm = time.perf_counter() - t_a
        failure = None
        try:
            st = steklov_eigs(dtn, k, tol=cfg.tol, max_iter=cfg.max_iter, seed=cfg.seed)
        except NotConverged as exc:
            st, failure = exc.result, exc
        rep = dict(st.report)
        rep.update(assembly_seconds=t_asm, solve_seconds=time.perf_counter() - t0 - t_asm,
                   ritz_history=[list(map(float, h)) for h in st.history],
                   min_distance=dtn.ops.min_distance)
        return _Computed(analysis.TruncatedSpectrum.from_steklov(st, dtn.ops.M), st, rep, failure)
    if cfg.operator == "laplace":
        lam, U = laplace_eigs(mesh, k)
        M = cotan_laplacian(mesh).M
        return _Computed(analysis.TruncatedSpectrum(lam, U, M, "laplace"), None, {"solve_seconds": time.perf_counter() - t0})
    if tet_path is None:
        raise UsageError("--operator fem needs --tet")
    tet = load_tet_mesh(tet_path)
    fem = fem_dtn_schur(tet)
    _check_same_boundary(mesh, fem.surface)
    lam, Ub = fem_steklov_eigs(fem, k)
    order = _match_vertices(mesh.vertices, fem.surface.vertices)
    U = Ub[order]
    return _Computed(analysis.TruncatedSpectrum(lam, U, mass_matrix(mesh), "fem"), None, {"solve_seconds": time.perf_counter() - t0})


def _match_vertices(A, B, tol=1e-8):
    """Index ``j`` per row of ``A`` with ``B[j] == A[i]``; raises Inconsistent on mismatch."""
    d, idx = cKDTree(B).query(A)
    bad = np.flatnonzero(d > tol * max(1.0, np.abs(A).max(initial=0)))
    if len(bad) or len(A) != len(B) or len(np.unique(idx)) != len(idx):
        raise Inconsistent(
            "surface mesh and tet boundary have different vertex sets",
            {"surface_vertices": len(A), "tet_boundary_vertices": len(B), "unmatched_surface_vertices": bad[:50].tolist(),
             "unmatched_count": int(len(bad))},
        )
    return idx


def _check_same_boundary(surface, tet_surface):
    _match_vertices(surface.vertices, tet_surface.vertices)


# ---------------------------------------------------------------- commands


def cmd_spectrum(cfg: RunConfig):
    out = Path(cfg.out_dir)
    mesh = _load(cfg.inputs[0], cfg)
    comp = _compute_spectrum(mesh, cfg, cfg.options.get("tet"))
    spec = comp.spec
    prov = _provenance(cfg, mesh.checksum)
    doc = dict(prov)
    doc.update(
        operator=cfg.operator,
        n_vertices=mesh.n_vertices,
        eigenvalues=[float(x) for x in spec.eigenvalues],
        converged=comp.failure is None,
    )
    if comp.steklov is not None:
        doc["residuals"] = [float(x) for x in comp.steklov.residuals]
        doc["analytic_null_modes"] = int(comp.steklov.n_analytic)
    if cfg.normalize:
        doc["normalized_eigenvalues"] = [float(x) for x in spec.eigenvalues * isoperimetric_scale(mesh)]
    _write_json(out / "spectrum.json", doc)
    meta = _meta_lines(cfg, mesh.checksum)
    analysis.DescriptorTable(spec.phi, np.arange(spec.k, dtype=float), "u").write_csv(out / "eigenvectors.csv", meta)
    if comp.steklov is not None:
        comp.steklov.write_csv(out / "neumann.csv", "Tn", meta)
    rep = dict(prov)
    rep.update(comp.report)
    rep["converged"] = comp.failure is None
    _write_json(out / "report.json", _jsonable(rep))
    if comp.failure is not None:
        raise comp.failure
    return doc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _spectrum_or_fail(mesh, cfg):
    comp = _compute_spectrum(mesh, cfg, cfg.options.get("tet"))
    if comp.failure is not None:
        raise comp.failure
    return comp


def cmd_descriptors(cfg: RunConfig):
    out = Path(cfg.out_dir)
    mesh = _load(cfg.inputs[0], cfg)
    spec = _spectrum_or_fail(mesh, cfg).spec
    opts = cfg.options
    if opts["samples"] < 1:
        raise UsageError("--samples must be positive")
    if opts["kind"] == "hks":
        table = analysis.hks(spec, scaled=opts["scaled"], num=opts["samples"])
    else:
        table = analysis.wks(spec, sigma=opts["sigma"], num=opts["samples"])
    meta = _meta_lines(cfg, mesh.checksum)
    table.write_csv(out / f"{table.kind}.csv", meta)
    doc = _provenance(cfg, mesh.checksum)
    doc.update(kind=table.kind, grid=[float(g) for g in table.grid], metadata=_jsonable(table.meta),
               eigenvalues=[float(x) for x in spec.eigenvalues])
    _write_json(out / "descriptors.json", doc)
    return doc


def cmd_distance(cfg: RunConfig):
    out = Path(cfg.out_dir)
    mesh = _load(cfg.inputs[0], cfg)
    src = cfg.options["source"]
    if not 0 <= src < mesh.n_vertices:
        raise UsageError(f"source vertex {src} out of range [0, {mesh.n_vertices})")
    spec = _spectrum_or_fail(mesh, cfg).spec
    others = np.array([src] + [i for i in range(mesh.n_vertices) if i != src])
    if cfg.options["kind"] == "diffusion":
        t = cfg.options["t"]
        if t is None:
            t = 1.0 / spec.nonzero()[0][0]
        if t <= 0:
            raise UsageError("--t must be positive")
        d = analysis.diffusion_distance(spec, t, src, others)
    else:
        t = None
        d = analysis.bisteklov_distance(spec, src, others)
    with open(out / "distance.csv", "w") as fh:
        for line in _meta_lines(cfg, mesh.checksum):
            fh.write(f"# {line}\n")
        fh.write("vertex,distance\n")
        for i, v in zip(others, d):
            fh.write(f"{i},{v:.17g}\n")
    return {"source": src, "t": t, "max": float(d.max())}


def cmd_compare_fem(cfg: RunConfig):
    out = Path(cfg.out_dir)
    tet_path = cfg.options.get("tet")
    if not tet_path:
        raise UsageError("compare-fem needs --tet")
    mesh = _load(cfg.inputs[0], cfg)
    tet = load_tet_mesh(tet_path)
    fem = fem_dtn_schur(tet, mass="lumped" if cfg.options["lumped"] else "full")
    _check_same_boundary(mesh, fem.surface)
    k = cfg.num_eigs
    lam_fem, _ = fem_steklov_eigs(fem, k)
    scfg = RunConfig(**{**asdict(cfg), "operator": "steklov"})
    comp = _compute_spectrum(mesh, scfg)
    lam_bem = comp.spec.eigenvalues
    cols = ["mode", "bem", "fem"]
    rows = [[i, lam_bem[i], lam_fem[i]] for i in range(k)]
    if cfg.options["sphere"]:
        cols.append("analytic")
        for i, r in enumerate(rows):
            r.append(float(int(np.floor(np.sqrt(i)))))
    with open(out / "compare.csv", "w") as fh:
        for line in _meta_lines(cfg, mesh.checksum):
            fh.write(f"# {line}\n")
        fh.write(f"# boundary vertices: surface {mesh.n_vertices}, tet {len(fem.boundary)}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join([str(r[0])] + [f"{x:.17g}" for x in r[1:]]) + "\n")
    if comp.failure is not None:
        raise comp.failure
    return {"bem": lam_bem.tolist(), "fem": lam_fem.tolist()}


def read_correspondence(path, n_source, n_target):
    if path is None:
        if n_source != n_target:
            raise Inconsistent(f"identity correspondence needs equal vertex counts ({n_source} vs {n_target})")
        return np.arange(n_source)
    try:
        c = np.loadtxt(path, dtype=np.int64, comments="#", ndmin=1)
    except ValueError as exc:
        raise ParseError(f"malformed correspondence file: {exc}") from None
    if c.shape != (n_source,):
        raise Inconsistent(f"correspondence lists {c.size} entries for {n_source} source vertices")
    if c.min(initial=0) < 0 or c.max(initial=0) >= n_target:
        raise Inconsistent("correspondence index outside the target mesh")
    return c


def _shape_difference(src_mesh, src_spec, tgt_path, corr_path, cfg):
    tgt = _load(tgt_path, cfg)
    corr = read_correspondence(corr_path, src_mesh.n_vertices, tgt.n_vertices)
    tspec = _spectrum_or_fail(tgt, cfg).spec
    F = analysis.functional_map(src_spec, tspec, corr)
    base = cfg.options["base"]
    L_M = L_N = None
    if base == "conformal":
        L_M, L_N = cotan_laplacian(src_mesh).L, cotan_laplacian(tgt).L
    sd = analysis.shape_difference(src_spec, tspec, F, base, L_M, L_N)
    return tgt, sd, analysis.pointwise_distortion(sd, src_spec)


def cmd_shapediff(cfg: RunConfig):
    out = Path(cfg.out_dir)
    opts = cfg.options
    mesh = _load(cfg.inputs[0], cfg)
    spec = _spectrum_or_fail(mesh, cfg).spec
    tgt, sd, dist = _shape_difference(mesh, spec, opts["target"], opts.get("correspondence"), cfg)
    write_matrices(out / "shape_difference.bin", {"D": sd.D, "F": sd.F})
    checks = {"source": mesh.checksum, "target": tgt.checksum}
    meta = _meta_lines(cfg, checks)
    with open(out / "distortion.csv", "w") as fh:
        for line in meta:
            fh.write(f"# {line}\n")
        fh.write("vertex,distortion\n")
        for i, v in enumerate(dist):
            fh.write(f"{i},{v:.17g}\n")
    doc = _provenance(cfg, checks)
    dev = np.abs(np.log(np.where(np.isfinite(dist) & (dist > 0), dist, 1.0)))
    doc.update(base=sd.base, deflated_modes=sd.offset, max_deviation_vertex=int(np.argmax(dev)),
               D_eigenvalues=sorted(float(x) for x in np.linalg.eigvals(sd.D).real))
    manifest = opts.get("manifest")
    if manifest:
        base_dir = Path(manifest).parent
        names, fields = [], []
        for line in Path(manifest).read_text().splitlines():
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tpath = base_dir / parts[0]
            cpath = base_dir / parts[1] if len(parts) > 1 else None
            _, _, d = _shape_difference(mesh, spec, tpath, cpath, cfg)
            names.append(parts[0])
            fields.append(np.log(np.clip(d, 1e-300, 1e300)))
        coords = analysis.pca_embed(np.array(fields), opts["dims"])
        with open(out / "pca.csv", "w") as fh:
            for line in meta:
                fh.write(f"# {line}\n")
            fh.write("name," + ",".join(f"pc{j}" for j in range(coords.shape[1])) + "\n")
            for nm, row in zip(names, coords):
                fh.write(nm + "," + ",".join(f"{x:.17g}" for x in row) + "\n")
        doc["manifest_entries"] = names
    _write_json(out / "shapediff.json", doc)
    return doc


COMMANDS = {
    "spectrum": cmd_spectrum,
    "descriptors": cmd_descriptors,
    "distance": cmd_distance,
    "compare-fem": cmd_compare_fem,
    "shapediff": cmd_shapediff,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        with _limit_threads():
            COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"bemdtn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Inconsistent as exc:
        print(f"bemdtn: inconsistent input: {exc}", file=sys.stderr)
        if exc.report:
            print(json.dumps(exc.report, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_INCONSISTENT
    except (ParseError, OSError) as exc:
        print(f"bemdtn: cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    except NoConvergence as exc:
        print(f"bemdtn: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except BemDtnError as exc:
        print(f"bemdtn: invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"bemdtn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
