"""Command-line front end.

Subcommands: ``integrand check``, ``torsion solve``, ``surface curvature``,
``deficits``, ``stability``.  Every run is driven by a flat key-path config
file (see :mod:`wulffstab.config`); outputs are deterministic for a fixed
config and seed, with BLAS thread pools pinned to the configured thread
count so reductions do not reorder.

Exit codes: 0 success, 2 numeric failure or partial results, 64 bad config.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_CONFIG = 64


def _build_parser():
    ap = argparse.ArgumentParser(prog="wulffstab",
                                 description="Anisotropic geometry and "
                                             "stability checks around Wulff shapes")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread cap (default: WULFFSTAB_THREADS or 1)")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    integ = sub.add_parser("integrand").add_subparsers(dest="subcommand",
                                                       required=True)
    p = integ.add_parser("check", help="validate the structural identities")
    _common(p)
    p.add_argument("--dirs", type=int, default=1000)

    tors = sub.add_parser("torsion").add_subparsers(dest="subcommand",
                                                    required=True)
    p = tors.add_parser("solve", help="solve the torsion problem")
    _common(p)

    surf = sub.add_parser("surface").add_subparsers(dest="subcommand",
                                                    required=True)
    p = surf.add_parser("curvature", help="sample a surface with curvature")
    _common(p)

    p = sub.add_parser("deficits", help="deficits and identity residuals "
                                        "for one case")
    _common(p)

    p = sub.add_parser("stability", help="run a perturbation family")
    _common(p)
    return ap


def _common(p):
    p.add_argument("--config", required=True)
    p.add_argument("--out", nargs="*", default=[],
                   help="override output paths (report [table])")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("WULFFSTAB_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=max(1, threads))
    except ImportError:  # determinism then depends on the BLAS build
        limiter = None

    from .config import ConfigError, ExperimentConfig
    try:
        cfg = ExperimentConfig.from_file(args.config)
    except (OSError, ConfigError) as exc:
        print(f"wulffstab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "integrand":
            return _cmd_integrand_check(cfg, args)
        if args.command == "torsion":
            return _cmd_torsion_solve(cfg, args)
        if args.command == "surface":
            return _cmd_surface_curvature(cfg, args)
        if args.command == "deficits":
            return _cmd_deficits(cfg, args)
        if args.command == "stability":
            return _cmd_stability(cfg, args)
        raise AssertionError(args.command)
    finally:
        if limiter is not None:
            limiter.unregister()


def _report_path(cfg, args, default):
    if args.out:
        return args.out[0]
    return cfg.out_report or default


def _cmd_integrand_check(cfg, args):
    from .io import write_report
    I = cfg.build_integrand()
    rep = I.validate(n_dirs=args.dirs, seed=cfg.seed)
    out = _report_path(cfg, args, "integrand_check.json")
    write_report({"validation": rep.to_dict()}, out)
    if args.verbose or True:
        print(f"integrand {I.kind}: ok={rep.ok} "
              f"euler={rep.euler_max:.2e} duality={rep.duality_max:.2e} "
              f"matrix={rep.matrix_identity_max:.2e} eig_min={rep.eigen_min:.3e}")
    print(f"wrote {out}")
    return EXIT_OK if rep.ok else EXIT_NUMERIC


def _solve_case(cfg, eps=None, verbose=False):
    from .grid import GridDomain
    from .torsion import solve_torsion
    I = cfg.build_integrand()
    prof = cfg.build_profile(I, eps=eps)
    dom = GridDomain(prof, h=cfg.h, center=cfg.center(),
                     theta_min=cfg.theta_min)
    sol = solve_torsion(dom, I, tol=cfg.solver_tol,
                        max_iter=cfg.solver_max_iter, verbose=verbose)
    return I, prof, dom, sol


def _cmd_torsion_solve(cfg, args):
    from .io import write_field, write_report, write_boundary_csv
    from .torsion import SolveError
    try:
        I, prof, dom, sol = _solve_case(cfg, verbose=args.verbose)
    except SolveError as exc:
        print(f"wulffstab: solve failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    fmin = sol.min_value()
    payload = {
        "residual": sol.residual,
        "iterations": sol.iterations,
        "f_inf": abs(fmin),
        "c0_bound": sol.c0_bound,
        "c0_margin": sol.c0_margin,
        "energy_history": sol.energy_history,
        "n_active": dom.n_active,
        "h": dom.h,
    }
    out = _report_path(cfg, args, "torsion.json")
    write_report(payload, out)
    print(f"solved: residual={sol.residual:.3e} iters={sol.iterations} "
          f"|f|_inf={abs(fmin):.6f} c0_margin={sol.c0_margin:+.2%}")
    if cfg.out_field or len(args.out) > 1:
        path = args.out[1] if len(args.out) > 1 else cfg.out_field
        write_field(sol.f, path)
        print(f"wrote {path}")
    if cfg.out_boundary:
        write_boundary_csv(sol.boundary_trace, cfg.out_boundary)
        print(f"wrote {cfg.out_boundary}")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_surface_curvature(cfg, args):
    from .io import write_surface_csv
    from .surface import sample_star, aniso_curvature, StarLevelFn
    I = cfg.build_integrand()
    prof = cfg.build_profile(I)
    M = sample_star(prof, cfg.resolution, center=cfg.center(), dim=cfg.dim)
    aniso_curvature(M, I, StarLevelFn(prof, cfg.center()))
    out = args.out[0] if args.out else (cfg.out_surface or "surface.csv")
    write_surface_csv(M, out)
    print(f"sampled {M.n_samples} points: H in [{M.H.min():.4f}, {M.H.max():.4f}], "
          f"max |S_ring| = {float(np.sqrt(np.maximum(M.traceless_sq, 0).max())):.3e}")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_deficits(cfg, args):
    from .io import write_report
    from .surface import sample_star, aniso_curvature, StarLevelFn
    from .analysis import analyze_case
    from .torsion import SolveError
    try:
        I, prof, dom, sol = _solve_case(cfg, verbose=args.verbose)
    except SolveError as exc:
        print(f"wulffstab: solve failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    M = sample_star(prof, cfg.resolution, center=cfg.center(), dim=cfg.dim)
    aniso_curvature(M, I, StarLevelFn(prof, cfg.center()))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = analyze_case(sol, M, eps=cfg.domain_eps[0], p=cfg.p,
                           seed=cfg.seed, n_slices=cfg.slices,
                           with_slice=cfg.with_slice)
    out = _report_path(cfg, args, "deficits.json")
    write_report({"case": rep.to_dict()}, out)
    print(f"hk={rep.hk_deficit:.3e} alex={rep.alexandrov_deficit:.3e} "
          f"serrin={rep.serrin_deficit:.3e} dist={rep.hausdorff_dist:.3e}")
    print(f"wrote {out}")
    return EXIT_NUMERIC if rep.error else EXIT_OK


def _cmd_stability(cfg, args):
    from .io import write_report, write_table_csv
    from .analysis import stability_experiment
    I = cfg.build_integrand()
    ladder = cfg.refine or [cfg.h]
    all_rows = []
    payload_cases = []
    failed = False
    for h in ladder:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = stability_experiment(
                I, cfg.domain_eps, h=h, r=cfg.domain_r,
                profile=cfg.domain_profile, resolution=cfg.resolution,
                p=cfg.p, seed=cfg.seed, n_slices=cfg.slices,
                solver_opts={"tol": cfg.solver_tol,
                             "max_iter": cfg.solver_max_iter},
                verbose=args.verbose)
        for rep in out["reports"]:
            row = rep.to_dict()
            row.pop("fitted", None)
            row.pop("fit_info", None)
            all_rows.append(row)
            if rep.error:
                failed = True
        payload_cases.append({
            "h": h,
            "cases": [rep.to_dict() for rep in out["reports"]],
            "ratios": {k: v.tolist() for k, v in out["ratios"].items()},
            "flags": out["flags"],
        })
    report_path = _report_path(cfg, args, "report.json")
    write_report({"runs": payload_cases, "eps": cfg.domain_eps}, report_path)
    print(f"wrote {report_path}")
    table_path = args.out[1] if len(args.out) > 1 else cfg.out_table
    if table_path:
        write_table_csv(all_rows, table_path)
        print(f"wrote {table_path}")
    last = payload_cases[-1]
    for k, v in last["ratios"].items():
        print(f"  ratio {k:8s}: " + " ".join("-" if w is None or not np.isfinite(w)
                                             else f"{w:.3f}" for w in v))
    if any(last["flags"].values()):
        print("  WARNING: monotone ratio growth flagged:",
              [k for k, f in last["flags"].items() if f])
    return EXIT_NUMERIC if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
