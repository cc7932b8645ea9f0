"""Command-line interface: ``kymorecon <subcommand> [options]``.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 on success, 1 when a frame did not converge or diverged,
2 on usage or input errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import FormatError, SolverDivergenceError
from .baselines import fit_background, nn_kymograph, parametric_ml_fit, stack_background_rates
from .conditioning import run_error_sweep, run_rcn_sweep
from .experiments import (
    DEFAULT_BIN_SIZES,
    DEFAULT_LAMBDAS,
    DEFAULT_PSNRS,
    DEFAULT_RCN_BIN_SIZES,
    GEOMETRIES,
    bin_sweep,
    lambda_sweep,
    map_kymograph,
    nn_error,
    psnr_sweep,
    reconstruct_frames,
    scenario_curve,
    scenario_density,
    simulate,
    truth_kymograph,
)
from .io import (
    ExperimentConfig,
    atomic_write,
    canonical_json,
    imaging_from_header,
    read_config,
    read_geometry,
    read_kymograph,
    read_photometry,
    read_stack,
    write_diagnostics,
    write_geometry,
    write_heatmap,
    write_kymograph,
    write_manifest,
    write_stack,
    write_table,
)
from .microscope import BackgroundModel, build_system, grey_to_photons

logger = logging.getLogger("kymorecon")


class UsageError(Exception):
    pass


def _floats(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _ints(text):
    values = _floats(text)
    if any(v != int(v) for v in values):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return [int(v) for v in values]


# --------------------------------------------------------------- helpers

def _load_config(args):
    config = read_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


def _load_curves(source, n_frames=None):
    """Curves from a geometry CSV or a built-in name (gm1, gm2)."""
    if source is None:
        raise UsageError("--geometry is required (a geometry CSV or one of gm1, gm2)")
    if source in GEOMETRIES:
        return [scenario_curve(source, f) for f in range(n_frames or 1)]
    curves = read_geometry(source)
    if n_frames is not None and n_frames != len(curves):
        if len(curves) != 1:
            raise UsageError(f"--frames {n_frames} does not match the {len(curves)} curves in {source}")
        c = curves[0]
        curves = [type(c)(*_curve_args(c), frame_index=f) for f in range(n_frames)]
    return curves


def _config_has_background(args):
    if not args.config:
        return False
    text = Path(args.config).read_text(encoding="utf-8")
    return bool(text.strip()) and "background" in json.loads(text)


def _curve_args(c):
    if c.kind == "line":
        return (c.origin, c.direction, c.length)
    return (c.control_points,)


def _density_from_source(source):
    if source in ("pm1", "pm2"):
        return scenario_density(source)
    ell, phi = read_photometry(source)
    step = float(ell[1] - ell[0]) if len(ell) > 1 else 2.0 * float(ell[0])
    values = phi.values

    def density(x):
        idx = np.clip(np.floor(np.asarray(x) / step).astype(int), 0, len(values) - 1)
        return values[idx]

    return density


def _stack_files(directory, kind="grey"):
    files = sorted(Path(directory).glob(f"{kind}_*.json"))
    if not files:
        raise UsageError(f"no {kind}_*.json stacks in {directory}")
    return files


def _with_payloads(heads):
    """Stack header paths plus their raw payloads, so manifests hash both."""
    return [q for h in heads for q in (Path(h), Path(h).with_suffix(".raw"))]


def _load_greys(args, config):
    stacks = [read_stack(p) for p in _stack_files(args.input)]
    for s in stacks:
        if s.header["dtype"] != "u16":
            raise FormatError("grey stacks must be u16")
    imaging = imaging_from_header(stacks[0].header)
    config = config.replace(imaging=imaging)
    curves = _load_curves(args.geometry or str(Path(args.input) / "geometry.csv"))
    if len(curves) != len(stacks):
        raise UsageError(f"{len(stacks)} stacks but {len(curves)} curves")
    return [s.data for s in stacks], curves, config, _with_payloads(_stack_files(args.input))


def _finish(args, config, outputs, inputs=(), extra=None):
    extra = dict(extra or {})
    extra["argv"] = sys.argv[1:]
    write_manifest(args.out, args.command, config, inputs=inputs, outputs=outputs, extra=extra)


# ------------------------------------------------------------ subcommands

def cmd_simulate(args):
    config = _load_config(args)
    curves = _load_curves(args.geometry, args.frames)
    density = _density_from_source(args.photometry)
    data = simulate(curves, density, config, psnr=args.psnr)
    out = Path(args.out)
    outputs = []
    for curve, frame in zip(curves, data.frames):
        heads = [write_stack(out / f"grey_{curve.frame_index:04d}", frame.grey, data.imaging, curve.frame_index)]
        if args.photons:
            heads.append(write_stack(out / f"photons_{curve.frame_index:04d}",
                                     frame.photons.astype(np.float32), data.imaging, curve.frame_index))
        outputs.extend(_with_payloads(heads))
    outputs.append(write_geometry(curves, out / "geometry.csv"))
    outputs.append(write_kymograph(truth_kymograph(curves, density, data.imaging), out / "truth.csv"))
    _finish(args, data.config, outputs, extra={"acquisition_s": data.imaging.acquisition_time,
                                               "psnr_db": args.psnr, "photometry": args.photometry})
    return 0


def cmd_reconstruct(args):
    config = _load_config(args)
    greys, curves, config, inputs = _load_greys(args, config)
    # an explicit rate or a background section in the config wins; otherwise fit it
    background = None
    if args.background_rate is not None:
        background = BackgroundModel(0.0, 0.0, args.background_rate)
    elif not _config_has_background(args) and len(greys) >= 3:
        background = fit_background(greys, config.camera, config.imaging)
        logger.info("fitted background: %s", background)
    if background is not None:
        config = config.replace(background=background)
    try:
        results = reconstruct_frames(greys, curves, config, args.bin_size, args.lam, args.prior)
    except SolverDivergenceError as exc:
        logger.error("solver diverged in frame %s at iteration %d", getattr(exc, "frame", "?"), exc.iteration)
        return 1
    out = Path(args.out)
    kymo = map_kymograph(results, config.imaging)
    outputs = [write_kymograph(kymo, out / "map.csv"), write_heatmap(kymo, out / "map.pgm")]
    for r in results:
        outputs.append(write_diagnostics(r.diagnostics, out / "diagnostics" / f"frame_{r.frame_index:04d}.csv"))
    failed = [r.frame_index for r in results if not r.diagnostics.converged]
    _finish(args, config, outputs, inputs, {"lambda": args.lam, "bin_size_um": args.bin_size,
                                            "prior": args.prior, "unconverged_frames": failed})
    if failed:
        logger.error("frames %s did not converge within %d iterations", failed, config.solver.max_iters)
        return 1
    return 0


def cmd_nn(args):
    config = _load_config(args)
    greys, curves, config, inputs = _load_greys(args, config)
    kymo = nn_kymograph(greys, curves, config.imaging, args.sample_spacing)
    out = Path(args.out)
    outputs = [write_kymograph(kymo, out / "nn.csv"), write_heatmap(kymo, out / "nn.pgm")]
    _finish(args, config, outputs, inputs, {"clamped_samples": int(kymo.clamped.sum())})
    return 0


def cmd_fit_background(args):
    config = _load_config(args)
    stacks = [read_stack(p) for p in _stack_files(args.input)]
    imaging = imaging_from_header(stacks[0].header)
    greys = [s.data for s in stacks]
    frames = [s.t_index for s in stacks]
    model = fit_background(greys, config.camera, imaging, frames)
    rates = stack_background_rates(greys, config.camera, imaging)
    out = Path(args.out)
    result = {"amplitude": model.amplitude, "decay_rate": model.decay_rate, "offset": model.offset,
              "frames": frames, "rates": rates.tolist()}
    path = atomic_write(out / "background.json", canonical_json(result))
    _finish(args, config.replace(background=model, imaging=imaging), [path], _with_payloads(_stack_files(args.input)))
    return 0


def cmd_fit_model(args):
    config = _load_config(args)
    greys, curves, config, inputs = _load_greys(args, config)
    f = args.frame
    if not 0 <= f < len(greys):
        raise UsageError(f"--frame {f} out of range (0..{len(greys) - 1})")
    curve = curves[f]
    system = build_system(curve, args.fit_bin_size, config.psf, config.imaging)
    bg = config.background.integrated(config.imaging, curve.frame_index)
    counts = grey_to_photons(config.camera, greys[f]).ravel()
    fit = parametric_ml_fit(args.model, counts, system, bg, budget=args.budget, seed=config.seed)
    out = Path(args.out)
    result = {"model": fit.model, "params": fit.params.tolist(), "nll": fit.nll,
              "initial_nll": fit.initial_nll, "nfev": fit.nfev, "frame": curve.frame_index}
    outputs = [atomic_write(out / "fit.json", canonical_json(result))]
    kymo = truth_kymograph([curve], fit.density(), config.imaging)
    kymo = type(kymo)(kymo.frame, kymo.time, kymo.arc_length, kymo.intensity, "ml")
    outputs.append(write_kymograph(kymo, out / "ml.csv"))
    _finish(args, config, outputs, inputs)
    return 0


def _scenario_data(args, config):
    curves = _load_curves(args.geometry or "gm1")
    return simulate(curves[:1], _density_from_source(args.photometry), config, psnr=args.psnr)


def cmd_lambda_sweep(args):
    config = _load_config(args)
    data = _scenario_data(args, config)
    rows = lambda_sweep(data, args.lambdas, args.bin_sizes, args.prior)
    out = Path(args.out)
    cols = ["bin_size_um", "lambda", "l1_error", "jaccard", "n_iter", "converged"]
    outputs = [write_table(out / "lambda_sweep.csv", rows, cols)]
    _finish(args, data.config, outputs, extra={"nn_l1_error": nn_error(data)})
    return 0


def cmd_bin_sweep(args):
    config = _load_config(args)
    curve = _load_curves(args.geometry or "gm1")[0]
    rows = bin_sweep(curve, config, args.bin_sizes)
    outputs = [write_table(Path(args.out) / "bin_sweep.csv", rows, ["bin_size_um", "n_bases", "rcn_hth", "rcn_ata"])]
    _finish(args, config, outputs)
    return 0


def cmd_psnr_sweep(args):
    config = _load_config(args)
    geometry = args.geometry or "gm1"
    if geometry not in GEOMETRIES or args.photometry not in ("pm1", "pm2"):
        raise UsageError("psnr-sweep runs on the built-in scenarios (gm1|gm2, pm1|pm2)")
    rows = psnr_sweep(geometry, args.photometry, config, args.psnrs, args.lambdas, args.bin_size, prior=args.prior)
    cols = ["psnr_db", "acquisition_s", "lambda", "bin_size_um", "l1_error", "jaccard", "n_iter", "converged"]
    outputs = [write_table(Path(args.out) / "psnr_sweep.csv", rows, cols)]
    _finish(args, config, outputs)
    return 0


def cmd_rcn_sweep(args):
    config = _load_config(args)
    rows = run_rcn_sweep(args.radii, args.counts)
    outputs = [write_table(Path(args.out) / "rcn_sweep.csv", rows, ["radius_px", "n_sources", "rcn"])]
    _finish(args, config, outputs)
    return 0


def cmd_error_sweep(args):
    config = _load_config(args)
    rows = run_error_sweep(args.radii, args.counts, args.repeats, mu_bg=args.mu_bg, phi_true=args.phi_true,
                           seed=config.seed, noiseless=args.noiseless)
    outputs = [write_table(Path(args.out) / "error_sweep.csv", rows, ["radius_px", "n_sources", "median_l2_error"])]
    _finish(args, config, outputs, extra={"repeats": args.repeats})
    return 0


def cmd_render(args):
    config = _load_config(args)
    kymo = read_kymograph(args.kymograph)
    name = Path(args.kymograph).with_suffix(".pgm").name
    outputs = [write_heatmap(kymo, Path(args.out) / name)]
    _finish(args, config, outputs, inputs=[args.kymograph])
    return 0


# ----------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="kymorecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults: reference setup)")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    def add_input(p):
        p.add_argument("--input", metavar="DIR", required=True, help="directory with grey_*.json stacks")
        p.add_argument("--geometry", metavar="PATH", help="geometry CSV (default: DIR/geometry.csv)")

    def add_scenario(p):
        p.add_argument("--geometry", metavar="PATH", help="geometry CSV or gm1|gm2 (default gm1)")
        p.add_argument("--photometry", default="pm2", help="pm1|pm2 or a photometry CSV (default pm2)")
        p.add_argument("--prior", choices=("laplace", "gaussian"), default="laplace")

    p = add("simulate", cmd_simulate, "render grey stacks of a curve")
    p.add_argument("--geometry", metavar="PATH", help="geometry CSV or gm1|gm2")
    p.add_argument("--photometry", default="pm1", help="pm1|pm2 or a photometry CSV")
    p.add_argument("--psnr", type=float, metavar="DB", help="set the acquisition time from a PSNR")
    p.add_argument("--frames", type=int, metavar="N", help="number of frames")
    p.add_argument("--photons", action="store_true", help="also write f32 photon stacks")

    p = add("reconstruct", cmd_reconstruct, "MAP kymograph from grey stacks")
    add_input(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, metavar="X")
    p.add_argument("--bin-size", type=float, default=0.04, metavar="UM")
    p.add_argument("--prior", choices=("laplace", "gaussian"), default="laplace")
    p.add_argument("--background-rate", type=float, metavar="R",
                   help="constant background (photons/s/um^2); fitted when absent and >= 3 frames")

    p = add("nn", cmd_nn, "nearest-neighbour kymograph")
    add_input(p)
    p.add_argument("--sample-spacing", type=float, metavar="UM", help="default: one pixel")

    p = add("fit-background", cmd_fit_background, "exponential photobleaching fit")
    p.add_argument("--input", metavar="DIR", required=True)

    p = add("fit-model", cmd_fit_model, "parametric ML fit of pm1 or pm2")
    add_input(p)
    p.add_argument("--model", choices=("pm1", "pm2"), required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--budget", type=int, default=2000, help="evaluations per optimiser run")
    p.add_argument("--fit-bin-size", type=float, default=0.01, metavar="UM")

    p = add("lambda-sweep", cmd_lambda_sweep, "l1 error versus lambda and bin size")
    add_scenario(p)
    p.add_argument("--lambdas", type=_floats, default=list(DEFAULT_LAMBDAS))
    p.add_argument("--bin-sizes", type=_floats, default=list(DEFAULT_BIN_SIZES))
    p.add_argument("--psnr", type=float, metavar="DB")

    p = add("bin-sweep", cmd_bin_sweep, "RCN of the normal operators versus bin size")
    p.add_argument("--geometry", metavar="PATH", help="geometry CSV or gm1|gm2 (default gm1)")
    p.add_argument("--bin-sizes", type=_floats, default=list(DEFAULT_RCN_BIN_SIZES))

    p = add("psnr-sweep", cmd_psnr_sweep, "l1 error versus PSNR and lambda")
    add_scenario(p)
    p.add_argument("--psnrs", type=_floats, default=list(DEFAULT_PSNRS))
    p.add_argument("--lambdas", type=_floats, default=list(DEFAULT_LAMBDAS))
    p.add_argument("--bin-size", type=float, default=0.04, metavar="UM")

    p = add("rcn-sweep", cmd_rcn_sweep, "RCN of point-source systems")
    p.add_argument("--radii", type=_floats, default=[0.5, 1.0, 2.0, 4.0, 8.0])
    p.add_argument("--counts", type=_ints, default=[1, 2, 4, 8, 16, 32, 64])

    p = add("error-sweep", cmd_error_sweep, "Poisson ML error of point-source systems")
    p.add_argument("--radii", type=_floats, default=[0.5, 2.0, 8.0])
    p.add_argument("--counts", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--mu-bg", type=float, default=10.0)
    p.add_argument("--phi-true", type=float, default=400.0)
    p.add_argument("--noiseless", action="store_true")

    p = add("render", cmd_render, "16-bit PGM heatmap of a kymograph CSV")
    p.add_argument("--kymograph", metavar="PATH", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, ValueError, OSError) as exc:
        print(f"kymorecon {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
