"""Command-line interface.

Exit codes: 0 success, 1 invalid input, 2 solver did not converge.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import ParameterizationError, rectangular_param
from .diffgeo import FoldError, beltrami_from_map, curvatures
from .io import dumps, write_csv_matrix, write_index_csv, write_json, write_pvalues, write_rows
from .mesh import MeshError, TriMesh, load_landmarks, load_manifest, load_mesh, write_mesh
from .shape import (
    DEFAULT_PCUT_GRID,
    RHO_RANGE,
    ClassificationError,
    ShapeIndexParams,
    build_feature_matrix,
    classify,
    compute_terms,
    mean_surface,
    run_pipeline,
    significant_vertices,
)
from .synth import gen_dataset, preset
from .teichmuller import QCOptions, SolverError, landmark_tmap

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2
PRESETS = ("curvature-diff", "distortion-diff", "mixed", "null")

log = logging.getLogger("qcshape")


class UsageError(Exception):
    pass


class NonConvergence(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for non-convergence here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(x):
    v = float(x)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {x}")
    return v


def _pcut_grid(text):
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("p_cut values must lie in [0, 1]")
    return vals


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text}")


def _options(args):
    return QCOptions(uniformity_tol=args.uniformity_tol, mean_change_tol=args.mean_change_tol, max_iter=args.max_iter)


def _threads(args):
    return args.threads or os.cpu_count() or 1


def version_text():
    o = QCOptions()
    lines = [
        f"qcshape {__version__}",
        f"qc uniformity_tol={o.uniformity_tol} mean_change_tol={o.mean_change_tol} max_iter={o.max_iter}",
        f"qc smoothing_step={o.smoothing_step} smoothing_decay={o.smoothing_decay} fold_patience={o.fold_patience}",
        f"search rho=0.02pi range=[{RHO_RANGE[0] / math.pi:g}pi, {RHO_RANGE[1] / math.pi:g}pi] "
        f"p_cut_grid={','.join(f'{p:g}' for p in DEFAULT_PCUT_GRID)}",
        "classifier bagged decision trees n_estimators=100 score=out-of-bag",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- subcommands

def _load_pair(args):
    mi = load_mesh(args.mesh_i)
    mj = load_mesh(args.mesh_j)
    return mi, load_landmarks(args.lmk_i, mi), mj, load_landmarks(args.lmk_j, mj)


def cmd_param(args):
    mesh = load_mesh(args.mesh)
    lm = load_landmarks(args.landmarks, mesh)
    rp = rectangular_param(mesh, lm)
    out = Path(args.out)
    uv = rp.embedding.uv
    write_mesh(TriMesh(np.column_stack([uv, np.zeros(len(uv))]), mesh.faces, validate=False), out)
    side = rp.embedding.sidecar()
    side["landmark_uv"] = rp.landmark_uv.tolist()
    write_json(side, out.with_suffix(".json"))
    print(dumps(side), end="")
    return EXIT_OK


def cmd_map(args):
    mi, li, mj, lj = _load_pair(args)
    sm = landmark_tmap(mi, li, mj, lj, _options(args))
    data = sm.to_json()
    write_json(data, args.out)
    if args.mapped_obj:
        write_mesh(TriMesh(sm.points, mi.faces, validate=False), args.mapped_obj)
    summary = {k: data[k] for k in ("k", "distance", "residual_uniformity", "converged", "iterations")}
    print(dumps(summary), end="")
    if not sm.converged:
        raise NonConvergence(f"QC iteration stopped after {sm.iterations} iterations")
    return EXIT_OK


def cmd_distance(args):
    mi, li, mj, lj = _load_pair(args)
    sm = landmark_tmap(mi, li, mj, lj, _options(args))
    print(repr(float(sm.distance)))
    if not sm.converged:
        raise NonConvergence(f"QC iteration stopped after {sm.iterations} iterations")
    return EXIT_OK


def cmd_classify(args):
    ds = load_manifest(args.manifest)
    params = ShapeIndexParams.normalized(args.alpha, args.beta, args.gamma, args.p_cut)
    opts, n_jobs = _options(args), _threads(args)
    mean, lm, info = mean_surface(ds, opts, n_jobs)
    terms, maps, kept = compute_terms(ds, mean, lm, opts, n_jobs, mean_param=info["param"])
    C = build_feature_matrix(terms, params)
    eligible = ~mean.is_boundary() if args.exclude_boundary else None
    mask, p = significant_vertices(C, params.p_cut, eligible)
    report = classify(C, mask, params, seed=args.seed)
    report.extra.update({"n_subjects": len(kept), "n_vertices": int(mean.n_vertices), "medoid": info["medoid"]})
    out = Path(args.out_dir)
    write_json(report.to_json(), out / "report.json")
    write_csv_matrix(C.values, C.labels, terms.names, out / "features.csv")
    write_index_csv(np.flatnonzero(mask), out / "mask.csv")
    write_pvalues(p, out / "pvalues.csv")
    write_mesh(mean, out / "mean.obj")
    print(dumps({"overall_accuracy": report.overall_accuracy, "num_significant": report.num_significant}), end="")
    return EXIT_OK


def cmd_search(args):
    if not args.allow_any_rho and not (RHO_RANGE[0] - 1e-12 <= args.rho <= RHO_RANGE[1] + 1e-12):
        raise ValueError(f"--rho must lie in [0.01pi, 0.03pi] (got {args.rho}); pass --allow-any-rho to override")
    ds = load_manifest(args.manifest)
    res = run_pipeline(
        ds, rho=args.rho, p_cut_grid=args.pcut_grid, seed=args.seed, out_dir=args.out_dir,
        exclude_boundary=args.exclude_boundary, options=_options(args), n_jobs=_threads(args),
        allow_any_rho=args.allow_any_rho,
    )
    r = res.report
    p = r.params
    print(dumps({"overall_accuracy": r.overall_accuracy, "num_significant": r.num_significant,
                 "params": {"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma, "p_cut": p.p_cut}}), end="")
    return EXIT_OK


def cmd_gen(args):
    spec = preset(args.preset, seed=args.seed, resolution=args.resolution, noise_sigma=args.noise_sigma)
    ds = gen_dataset(spec, args.n, args.out_dir)
    write_json({"preset": args.preset, "n_per_class": args.n, **spec.to_dict()}, Path(args.out_dir) / "synth.json")
    print(f"wrote {len(ds)} subjects to {args.out_dir}")
    return EXIT_OK


def _histogram(values, bins, path):
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    write_rows(["bin_lo", "bin_hi", "count"], zip(edges[:-1], edges[1:], counts.tolist()), path)


def cmd_plotdata(args):
    mesh = load_mesh(args.mesh)
    lm = load_landmarks(args.landmarks, mesh)
    out = Path(args.out_dir)
    c = curvatures(mesh)
    rows = ((i, c.H[i], c.K[i], c.vertex_area[i], int(c.low_confidence[i])) for i in range(mesh.n_vertices))
    write_rows(["vertex", "H", "K", "area", "boundary"], rows, out / "curvature.csv")
    rp = rectangular_param(mesh, lm)
    mu_c = beltrami_from_map(mesh, rp.embedding.uv).abs
    _histogram(mu_c, args.bins, out / "mu_conformal_hist.csv")
    summary = {"conformal": {"mean_abs_mu": float(mu_c.mean()), "max_abs_mu": float(mu_c.max())}}
    if args.target_mesh:
        if not args.target_landmarks:
            raise ValueError("--target-mesh needs --target-landmarks")
        mj = load_mesh(args.target_mesh)
        lj = load_landmarks(args.target_landmarks, mj)
        sm = landmark_tmap(mesh, lm, mj, lj, _options(args), param_i=rp)
        mu_t = np.abs(sm.mu)
        _histogram(mu_t, args.bins, out / "mu_teichmuller_hist.csv")
        summary["teichmuller"] = {
            "mean_abs_mu": float(mu_t.mean()), "max_abs_mu": float(mu_t.max()), "k": sm.k,
            "residual_uniformity": sm.residual_uniformity, "converged": bool(sm.converged),
        }
    write_json(summary, out / "plotdata.json")
    print(dumps(summary), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _solver_flags(p):
    p.add_argument("--uniformity-tol", type=_positive, default=QCOptions.uniformity_tol)
    p.add_argument("--mean-change-tol", type=_positive, default=QCOptions.mean_change_tol)
    p.add_argument("--max-iter", type=int, default=QCOptions.max_iter)


def build_parser():
    ap = _Parser(prog="qcshape", description="Teichmuller maps and quasi-conformal shape classification")
    ap.add_argument("--version", action="store_true", help="print version, tolerances and defaults")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("param", help="conformal rectangle parameterization")
    p.add_argument("mesh")
    p.add_argument("landmarks")
    p.add_argument("--out", required=True, help="uv OBJ path; the JSON sidecar goes next to it")
    p.set_defaults(func=cmd_param)

    for name, fn, hlp in (("map", cmd_map, "landmark-matching Teichmuller map"),
                          ("distance", cmd_distance, "Teichmuller distance only")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("mesh_i")
        p.add_argument("lmk_i")
        p.add_argument("mesh_j")
        p.add_argument("lmk_j")
        _solver_flags(p)
        if name == "map":
            p.add_argument("--out", required=True, help="SurfaceMap JSON")
            p.add_argument("--mapped-obj", help="also write the mapped source mesh")
        p.set_defaults(func=fn)

    for name, fn in (("classify", cmd_classify), ("search", cmd_search)):
        p = sub.add_parser(name, help="classify at fixed weights" if name == "classify" else "spherical marching search")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--exclude-boundary", type=_bool, nargs="?", const=True, default=True)
        p.add_argument("--threads", type=int, default=None)
        _solver_flags(p)
        if name == "classify":
            p.add_argument("--alpha", type=float, default=0.0)
            p.add_argument("--beta", type=float, default=0.0)
            p.add_argument("--gamma", type=float, default=1.0)
            p.add_argument("--p-cut", type=float, default=1.0)
        else:
            p.add_argument("--rho", type=_positive, default=0.02 * math.pi)
            p.add_argument("--pcut-grid", type=_pcut_grid, default=DEFAULT_PCUT_GRID)
            p.add_argument("--allow-any-rho", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("gen", help="synthetic two-class dataset")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--n", type=int, default=20, help="subjects per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=int, default=1217)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plotdata", help="curvature and |mu| histogram data")
    p.add_argument("mesh")
    p.add_argument("landmarks")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target-mesh")
    p.add_argument("--target-landmarks")
    p.add_argument("--bins", type=int, default=50)
    _solver_flags(p)
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.version:
        print(version_text())
        return EXIT_OK
    if not args.cmd:
        build_parser().print_help(sys.stderr)
        return EXIT_INVALID
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return args.func(args)
    except NonConvergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (SolverError, FoldError, ParameterizationError) as e:
        print(f"error: solver failed: {e}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (MeshError, ClassificationError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
