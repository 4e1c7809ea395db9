"""Command-line pipeline: phantom / forward / adjoint-test / check-bolker /
visibility / symbol / normal / reconstruct / stability / perturb-sweep /
fanbeam-convert.

Every run writes its outputs plus a ``manifest.json`` recording the config
hash, input/output checksums, tool version, seed and chunk size, so a rerun
with identical inputs is byte-identical.  Exit codes: 0 ok, 2 config error,
3 numeric failure, 4 coverage/visibility error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
from scipy import ndimage

from . import __version__
from .errors import (
    ConfigError,
    CoverageError,
    CurveTomoError,
    DivergenceError,
    NumericBudgetError,
    OutOfRangeError,
)
from .geometry import TWO_PI, fd_derivatives
from .io_cli import (
    GeometryConfig,
    build_geometry,
    crc64,
    fanbeam_convert,
    read_grid_file,
    write_grid_file,
    write_pgm16,
)
from .microlocal import data_projection_rank, principal_symbol, visibility_map
from .operators import (
    CutoffAtlas,
    LevelSetTransform,
    NormalOperator,
    build_default_atlas,
    make_image_grid,
)
from .phantom import EllipseSpec, boundary_wavefront, default_phantom, render_phantom
from .recon import cg_normal_solve, landweber_solve, perturbation_sweep, stability_probe


def _load_config(path):
    if path is None:
        return GeometryConfig.from_dict({})
    with open(path) as fh:
        return GeometryConfig.from_json(fh.read())


def _file_checksum(path):
    with open(path, "rb") as fh:
        return crc64(fh.read())


class _Run:
    """Collects manifest data for one pipeline invocation."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.out_dir = args.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.manifest = {
            "tool": "curvetomo",
            "version": __version__,
            "command": args.command,
            "config_hash": config.hash(),
            "seed": getattr(args, "seed", None) or config.seed,
            "chunk_t": config.chunk_t,
            "threads": int(os.environ.get("CURVETOMO_THREADS", "1")),
            "inputs": {},
            "outputs": {},
            "metrics": {},
        }

    def add_input(self, path):
        self.manifest["inputs"][os.path.basename(path)] = _file_checksum(path)

    def write_grid(self, name, obj):
        path = os.path.join(self.out_dir, name)
        sidecar = write_grid_file(path, obj, geometry_hash=self.config.hash())
        self.manifest["outputs"][name] = sidecar["checksum"]
        return path

    def write_text(self, name, text):
        path = os.path.join(self.out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        self.manifest["outputs"][name] = _file_checksum(path)

    def write_pgm(self, name, array):
        path = os.path.join(self.out_dir, name)
        write_pgm16(path, array)
        self.manifest["outputs"][name] = _file_checksum(path)

    def finish(self):
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.manifest, fh, sort_keys=True, indent=1)
        return 0


def _phantom_from_config(config, nx, support_radius):
    if config.phantom:
        specs = [
            EllipseSpec(center=tuple(e["center"]), semi_axes=tuple(e["semi_axes"]),
                        angle=float(e.get("angle", 0.0)), density=float(e.get("density", 1.0)))
            for e in config.phantom
        ]
    else:
        specs = default_phantom()
    return specs, render_phantom(specs, nx, support_radius=support_radius)


def _transform(config, image_like):
    pf, mu, spec, _ = build_geometry(config)
    return pf, mu, LevelSetTransform(pf, mu, image_like, spec, interp=config.interp,
                                     chunk_t=config.chunk_t)


def cmd_phantom(args, config, run):
    _, _, _, image_kw = build_geometry(config)
    specs, img = _phantom_from_config(config, image_kw["nx"], image_kw["support_radius"])
    run.write_grid("phantom.grid", img)
    wfs = boundary_wavefront(specs, n_per_ellipse=max(8, args.wavefront_samples))
    rows = [["x1", "x2", "xi1", "xi2"]]
    rows += [[f"{c.x[0]:.12g}", f"{c.x[1]:.12g}", f"{c.xi[0]:.12g}", f"{c.xi[1]:.12g}"]
             for c in wfs.samples]
    run.write_text("wavefront.csv", "\n".join(",".join(r) for r in rows) + "\n")
    run.write_pgm("phantom.pgm", img.values)
    return run.finish()


def cmd_forward(args, config, run):
    img, _ = read_grid_file(args.image)
    run.add_input(args.image)
    _, _, tr = _transform(config, img)
    g = tr.forward(img)
    n_nan = int(np.sum(~np.isfinite(g.values)))
    run.manifest["metrics"]["nan_samples"] = n_nan
    run.write_grid("sinogram.grid", g)
    run.write_pgm("sinogram.pgm", g.values)
    return run.finish()


def cmd_adjoint_test(args, config, run):
    _, _, _, image_kw = build_geometry(config)
    img = make_image_grid(**image_kw)
    pf, mu, tr = _transform(config, img)
    rng = np.random.default_rng(run.manifest["seed"])
    worst = 0.0
    for _ in range(args.pairs):
        f = img.like(ndimage.gaussian_filter(rng.standard_normal((img.nx, img.ny)), 3.0))
        rad = np.hypot(*np.moveaxis(img.pixel_centers(), -1, 0))
        f = img.like(f.values * (rad <= 0.95 * img.support_radius))
        gv = ndimage.gaussian_filter(
            rng.standard_normal((len(tr.s_grid), len(tr.t_grid))), 3.0, mode="wrap")
        g = tr.forward(f).like(gv)
        Af = tr.forward(f)
        bp = tr.adjoint(g)
        rel = abs(Af.inner(g) - f.inner(bp)) / (Af.norm() * g.norm())
        worst = max(worst, rel)
    run.manifest["metrics"]["adjoint_discrepancy"] = worst
    run.manifest["metrics"]["tolerance"] = args.tol
    if worst > args.tol:
        raise NumericBudgetError(f"adjoint discrepancy {worst:.3e} exceeds {args.tol}")
    return run.finish()


def cmd_check_bolker(args, config, run):
    pf, _, _, image_kw = build_geometry(config)
    r = image_kw["support_radius"]
    n = args.grid
    xs = np.linspace(-r, r, n)
    t_vals = np.linspace(pf.t_range[0], pf.t_range[1], args.times, endpoint=False)
    rows = [["t", "x1", "x2", "h", "rank", "det"]]
    h_map = np.zeros((n, n))
    for t in t_vals:
        for i, x1 in enumerate(xs):
            for j, x2 in enumerate(xs):
                x = np.array([x1, x2])
                if not pf.branch_mask(t, x):
                    continue
                frame = fd_derivatives(pf, float(t), x)
                rank, det = data_projection_rank(pf, float(t), x, sigma=1.0)
                rows.append([f"{t:.9g}", f"{x1:.9g}", f"{x2:.9g}",
                             f"{frame.h:.12g}", str(rank), f"{det:.12g}"])
                if t == t_vals[0]:
                    h_map[i, j] = abs(frame.h)
    run.write_text("bolker.csv", "\n".join(",".join(r_) for r_ in rows) + "\n")
    run.write_pgm("bolker_h.pgm", h_map)
    h_vals = np.array([float(r_[3]) for r_ in rows[1:]])
    run.manifest["metrics"]["min_abs_h"] = float(np.min(np.abs(h_vals)))
    run.manifest["metrics"]["max_abs_h"] = float(np.max(np.abs(h_vals)))
    return run.finish()


def cmd_visibility(args, config, run):
    pf, _, _, image_kw = build_geometry(config)
    x = np.array([float(v) for v in args.point.split(",")])
    vm = visibility_map(pf, x, args.n_dirs)
    rows = [["dir1", "dir2", "count", "witnesses"]]
    for i in range(len(vm.directions)):
        wit = ";".join(f"{t:.9g}" for t, _ in vm.t_witness[i])
        rows.append([f"{vm.directions[i,0]:.9g}", f"{vm.directions[i,1]:.9g}",
                     str(int(vm.count[i])), wit])
    run.write_text("visibility.csv", "\n".join(",".join(r_) for r_ in rows) + "\n")
    # coarse count heatmap over the support
    n = 17
    r = image_kw["support_radius"]
    grid = np.linspace(-r * 0.95, r * 0.95, n)
    counts = np.zeros((n, n))
    for i, x1 in enumerate(grid):
        for j, x2 in enumerate(grid):
            if math.hypot(x1, x2) > r:
                continue
            counts[i, j] = visibility_map(pf, np.array([x1, x2]), 8).count.min()
    run.write_pgm("visibility_counts.pgm", counts)
    frac = float(np.mean(vm.count > 0))
    run.manifest["metrics"]["visible_fraction"] = frac
    if args.require_full and frac < 1.0:
        raise CoverageError(f"only {frac:.2%} of directions visible at {x.tolist()}")
    return run.finish()


def cmd_symbol(args, config, run):
    pf, mu, _, _ = build_geometry(config)
    x = np.array([float(v) for v in args.point.split(",")])
    atlas = CutoffAtlas.trivial()
    rows = [["xi1", "xi2", "p", "W_plus", "W_minus", "h_tilde", "visible", "t_used"]]
    for k in range(args.n_dirs):
        ang = TWO_PI * k / args.n_dirs
        xi = np.array([math.cos(ang), math.sin(ang)]) * args.xi_norm
        sv = principal_symbol(pf, mu, atlas, x, xi)
        rows.append([f"{xi[0]:.9g}", f"{xi[1]:.9g}", f"{sv.p:.12g}", f"{sv.W_plus:.12g}",
                     f"{sv.W_minus:.12g}", f"{sv.h_tilde:.12g}", str(sv.visible),
                     "" if sv.t_used is None else f"{sv.t_used:.9g}"])
    run.write_text("symbol.csv", "\n".join(",".join(r_) for r_ in rows) + "\n")
    return run.finish()


def cmd_normal(args, config, run):
    img, _ = read_grid_file(args.image)
    run.add_input(args.image)
    pf, mu, tr = _transform(config, img)
    n_charts = int(config.atlas.get("n_charts", 1))
    atlas = build_default_atlas(pf, img.support_radius, n_charts)
    Nf = NormalOperator(tr, atlas, symmetric=args.symmetric).apply(img)
    run.write_grid("normal.grid", Nf)
    run.write_pgm("normal.pgm", Nf.values)
    return run.finish()


def cmd_reconstruct(args, config, run):
    g, _ = read_grid_file(args.data)
    run.add_input(args.data)
    _, _, _, image_kw = build_geometry(config)
    img = make_image_grid(**image_kw)
    pf, mu, tr = _transform(config, img)
    n_charts = int(config.atlas.get("n_charts", 1))
    atlas = build_default_atlas(pf, img.support_radius, n_charts)
    op = NormalOperator(tr, atlas, symmetric=True)
    if args.solver == "cg":
        rec, report = cg_normal_solve(op, g, max_iter=args.iters, tol=args.tol,
                                      tikhonov=args.tikhonov)
    else:
        rec, report = landweber_solve(op, g, max_iter=args.iters,
                                      seed=run.manifest["seed"])
    run.write_grid("reconstruction.grid", rec)
    run.write_pgm("reconstruction.pgm", rec.values)
    run.manifest["metrics"].update({
        "iterations": report.iterations,
        "final_residual": report.residual_history[-1] if report.residual_history else 0.0,
        "runtime_s": report.runtime,
    })
    run.write_text("solve_report.json", json.dumps({
        "iterations": report.iterations,
        "residual_history": report.residual_history,
        "runtime": report.runtime,
    }, sort_keys=True, indent=1))
    return run.finish()


def cmd_stability(args, config, run):
    from .geometry import BreathingMotion, RotationMotion

    amplitudes = [float(a) for a in args.amplitudes.split(",")]
    if args.family == "breathing":
        family = lambda a: BreathingMotion(a)  # noqa: E731
    elif args.family == "rotation":
        family = lambda a: RotationMotion(-a)  # noqa: E731
    else:
        raise ConfigError(f"unknown stability family {args.family!r}")
    report = stability_probe(family, amplitudes, n_samples=args.samples,
                             nx=args.nx, nt=args.nt, seed=run.manifest["seed"])
    payload = {
        "amplitudes": report.amplitudes,
        "ratios": {str(a): r for a, r in report.ratios.items()},
        "median_ratio": {str(a): v for a, v in report.median_ratio.items()},
        "max_ratio": {str(a): v for a, v in report.max_ratio.items()},
        "min_ratio": {str(a): v for a, v in report.min_ratio.items()},
        "degenerate_flags": {str(a): v for a, v in report.degenerate_flags.items()},
        "seed": report.seed,
    }
    run.write_text("stability.json", json.dumps(payload, sort_keys=True, indent=1))
    rows = [["amplitude", "sample", "ratio"]]
    for a in report.amplitudes:
        for i, r in enumerate(report.ratios[a]):
            rows.append([f"{a:.9g}", str(i), f"{r:.12g}"])
    run.write_text("stability.csv", "\n".join(",".join(r_) for r_ in rows) + "\n")
    return run.finish()


def cmd_perturb_sweep(args, config, run):
    deltas = [float(d) for d in args.deltas.split(",")]
    table = perturbation_sweep(deltas, nx=args.nx, nt=args.nt, seed=run.manifest["seed"])
    payload = {"deltas": table.deltas, "ratios": table.ratios,
               "slope": table.slope, "monotone": table.monotone}
    run.write_text("perturb.json", json.dumps(payload, sort_keys=True, indent=1))
    rows = [["delta", "ratio"]] + [
        [f"{d:.9g}", f"{r:.12g}"] for d, r in zip(table.deltas, table.ratios)
    ]
    run.write_text("perturb.csv", "\n".join(",".join(r_) for r_ in rows) + "\n")
    return run.finish()


def cmd_fanbeam_convert(args, config, run):
    g_fan, _ = read_grid_file(args.data)
    run.add_input(args.data)
    R = float(config.phase.get("R", 3.0)) if config.phase.get("family") == "fanbeam" else args.R
    g_par, info = fanbeam_convert(g_fan, R, ns=args.ns, n_beta=args.n_beta,
                                  weight_jacobian=args.weight_jacobian)
    run.manifest["metrics"].update(info)
    run.write_grid("parallel.grid", g_par)
    run.write_pgm("parallel.pgm", g_par.values)
    return run.finish()


_COMMANDS = {
    "phantom": cmd_phantom,
    "forward": cmd_forward,
    "adjoint-test": cmd_adjoint_test,
    "check-bolker": cmd_check_bolker,
    "visibility": cmd_visibility,
    "symbol": cmd_symbol,
    "normal": cmd_normal,
    "reconstruct": cmd_reconstruct,
    "stability": cmd_stability,
    "perturb-sweep": cmd_perturb_sweep,
    "fanbeam-convert": cmd_fanbeam_convert,
}


def run_pipeline(command, config, args):
    """Dispatch one pipeline command; returns the process exit code."""
    run = _Run(args, config)
    return _COMMANDS[command](args, config, run)


def build_parser():
    p = argparse.ArgumentParser(prog="curvetomo",
                                description="dynamic tomography over level curves")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="geometry config JSON")
        sp.add_argument("--out-dir", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("phantom", help="render the configured phantom")
    common(sp)
    sp.add_argument("--wavefront-samples", type=int, default=64)

    sp = sub.add_parser("forward", help="apply the forward transform")
    common(sp)
    sp.add_argument("--image", required=True)

    sp = sub.add_parser("adjoint-test", help="duality check on random pairs")
    common(sp)
    sp.add_argument("--pairs", type=int, default=3)
    sp.add_argument("--tol", type=float, default=1e-3)

    sp = sub.add_parser("check-bolker", help="local Bolker determinant map")
    common(sp)
    sp.add_argument("--grid", type=int, default=9)
    sp.add_argument("--times", type=int, default=4)

    sp = sub.add_parser("visibility", help="per-direction witness times")
    common(sp)
    sp.add_argument("--point", default="0.0,0.0")
    sp.add_argument("--n-dirs", type=int, default=32)
    sp.add_argument("--require-full", action="store_true",
                    help="exit 4 unless every direction is visible")

    sp = sub.add_parser("symbol", help="principal symbol samples")
    common(sp)
    sp.add_argument("--point", default="0.1,0.0")
    sp.add_argument("--n-dirs", type=int, default=16)
    sp.add_argument("--xi-norm", type=float, default=8.0)

    sp = sub.add_parser("normal", help="apply the cutoff normal operator")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--symmetric", action="store_true")

    sp = sub.add_parser("reconstruct", help="iterative normal-equation solve")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--tikhonov", type=float, default=0.0)
    sp.add_argument("--solver", choices=("cg", "landweber"), default="cg")

    sp = sub.add_parser("stability", help="stability-ratio probe")
    common(sp)
    sp.add_argument("--family", choices=("breathing", "rotation"), default="breathing")
    sp.add_argument("--amplitudes", default="0.0,0.02,0.05")
    sp.add_argument("--samples", type=int, default=12)
    sp.add_argument("--nx", type=int, default=48)
    sp.add_argument("--nt", type=int, default=120)

    sp = sub.add_parser("perturb-sweep", help="operator perturbation scaling")
    common(sp)
    sp.add_argument("--deltas", default="0.0,0.001,0.003,0.01,0.03")
    sp.add_argument("--nx", type=int, default=48)
    sp.add_argument("--nt", type=int, default=120)

    sp = sub.add_parser("fanbeam-convert", help="rebin fan data to parallel")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--R", type=float, default=3.0)
    sp.add_argument("--ns", type=int, default=128)
    sp.add_argument("--n-beta", type=int, default=180)
    sp.add_argument("--weight-jacobian", action="store_true")

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return run_pipeline(args.command, config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CoverageError, OutOfRangeError) as exc:
        print(f"coverage/visibility error: {exc}", file=sys.stderr)
        if isinstance(exc, CoverageError) and exc.uncovered:
            for item in exc.uncovered[:20]:
                print(f"  uncovered: {item}", file=sys.stderr)
        return 4
    except (NumericBudgetError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except CurveTomoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
