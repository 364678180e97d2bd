"""Command line interface: ``patrecon <command> ...``.

Arrays are read and written as PATARR01 files with JSON sidecars carrying the
grid and acquisition geometry; images also get an 8-bit PGM preview.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import comparison, io
from .backprojection import dal_weights_deterministic, ubp, ubp_filter, weighted_backproject
from .forward import add_gaussian_noise, gaussian_irf, image_convolve, time_convolve, wave_forward
from .geometry import ImageGrid, default_time_grid
from .metrics import evaluate_suite
from .network import UnetConfig
from .phantoms import PhantomSpec, desk_phantom_spec, make_phantom
from .training import Dataset, TrainConfig, dalnet_apply, generate_dataset, load_checkpoint, save_checkpoint, train
from .variational import TvConfig, chambolle_pock_tv


def _write_image(path, img, grid, **extra):
    path = io.write_array(path, img, io.image_meta(grid, **extra))
    io.write_pgm(Path(path).with_suffix(".pgm"), img)
    return path


def _irf(args):
    return gaussian_irf(args.irf_sigma) if args.irf_sigma > 0 else np.ones(1)


def _read_sinogram(path):
    meta = io.read_meta(path)
    if meta.get("kind") != "sinogram":
        raise ValueError(f"{path}: sidecar does not describe a sinogram")
    geom, tgrid = io.geometry_from_meta(meta)
    return io.read_array(path).astype(np.float64), geom, io.grid_from_meta(meta["grid"]), tgrid


def cmd_phantom(args):
    grid = ImageGrid(args.n)
    template = desk_phantom_spec() if args.kind == "vessel" and args.n <= 64 else PhantomSpec()
    spec = dataclasses.replace(template, kind=args.kind, seed=args.seed)
    img = make_phantom(spec, grid, center=tuple(args.center), size=args.size)
    _write_image(args.out, img, grid, phantom=args.kind, seed=args.seed)


def cmd_simulate(args):
    img = io.read_array(args.image).astype(np.float64)
    grid = io.grid_from_meta(io.read_meta(args.image)["grid"])
    geom = comparison.parse_geometry(args.geometry)
    tgrid = default_time_grid(geom, grid)
    if args.psf:
        img = image_convolve(img, io.read_array(args.psf))
    g = wave_forward(img, geom, grid, tgrid)
    if args.irf_sigma > 0:
        g = time_convolve(g, _irf(args))
    g = add_gaussian_noise(g, args.noise, args.seed)
    io.write_array(args.out, g, io.sinogram_meta(geom, tgrid, grid, noise=args.noise, irf_sigma=args.irf_sigma))


def cmd_reconstruct(args):
    g, geom, grid, tgrid = _read_sinogram(args.data)
    if args.method == "ubp":
        rec = ubp(g, geom, grid, tgrid)
    elif args.method == "dal":
        rec = weighted_backproject(ubp_filter(g, geom, tgrid), dal_weights_deterministic(geom, grid), geom, grid, tgrid)
    elif args.method in ("tv", "tvpos"):
        config = TvConfig(lam=args.lam, n_iters=args.iters, constraint="nonneg" if args.method == "tvpos" else "none")
        trace = [] if args.trace else None
        rec = chambolle_pock_tv(g, _irf(args), config, geom, grid, tgrid, trace=trace)
        if args.trace:
            io.write_csv(args.trace, ["iteration", "objective"], [(i + 1, f"{v:.12g}") for i, v in enumerate(trace)])
    else:
        if not args.checkpoint:
            raise ValueError("--method dalnet needs --checkpoint")
        V, U = load_checkpoint(args.checkpoint)
        rec = dalnet_apply(V, U, g, geom, grid, tgrid)
    _write_image(args.out, rec, grid, method=args.method)


def cmd_train(args):
    if args.dataset and Path(args.dataset, "sinograms.patarr").exists():
        dataset = Dataset.load(args.dataset)
    else:
        acq = comparison.Acquisition.create(args.geometry, args.n, args.irf_sigma)
        n_pairs = args.n_train + args.n_val + args.n_test
        dataset = generate_dataset(n_pairs, acq.geom, acq.grid, acq.tgrid, acq.psf, args.noise, args.seed,
                                   val_fraction=args.n_val / n_pairs, test_fraction=args.n_test / n_pairs)
        if args.dataset:
            dataset.save(args.dataset)
    config = TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                         n_epochs=args.epochs, seed=args.seed, v_init=args.v_init)
    unet_config = UnetConfig(args.depth, args.base_channels, dataset.grid.n)
    result = train(dataset, config, unet_config, log=print)
    save_checkpoint(args.out, result.weights, result.unet, result.history)


def cmd_evaluate(args):
    if len(args.recon) != len(args.truth):
        raise ValueError(f"{len(args.recon)} reconstructions for {len(args.truth)} references")
    report = evaluate_suite([io.read_array(p) for p in args.recon], [io.read_array(p) for p in args.truth])
    print(comparison.format_table({args.label: report}))
    if args.csv:
        comparison.write_report(args.csv, {args.label: report})


def cmd_psf_estimate(args):
    grid = ImageGrid(args.n)
    psf = comparison.psf_from_irf(_irf(args), grid, args.crop)
    io.write_array(args.out, psf, {"kind": "psf", "irf_sigma": args.irf_sigma})


def cmd_compare(args):
    if args.dataset and Path(args.dataset, "sinograms.patarr").exists():
        dataset = Dataset.load(args.dataset)
    else:
        acq = comparison.Acquisition.create(args.geometry, args.n, args.irf_sigma)
        dataset = generate_dataset(args.n_test, acq.geom, acq.grid, acq.tgrid, acq.psf, args.noise, args.seed,
                                   val_fraction=0.0, test_fraction=1.0)
    if "test" in set(dataset.splits):
        dataset = dataset.subset("test")
    methods = args.methods.split(",")
    trained = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if "dalnet" in methods and trained is None:
        print("no --checkpoint given; skipping dalnet", file=sys.stderr)
        methods.remove("dalnet")
    irf = _irf(args)
    tv_configs = {"tv": TvConfig(lam=args.lam, n_iters=args.iters, constraint="none"),
                  "tvpos": TvConfig(lam=args.lam, n_iters=args.iters, constraint="nonneg")}
    if args.lambda_sweep:
        lambdas = comparison.parse_sweep(args.lambda_sweep)
        probe = Dataset(dataset.geom, dataset.grid, dataset.tgrid, dataset.sinograms[:args.sweep_pairs],
                        dataset.images[:args.sweep_pairs], dataset.splits[:args.sweep_pairs])
        for method, constraint in (("tv", "none"), ("tvpos", "nonneg")):
            if method in methods:
                best, table = comparison.lambda_sweep(probe, irf, lambdas, constraint, args.iters)
                for lam, err in table:
                    print(f"{method} lambda {lam:.3g}: l2 {err:.4f}")
                tv_configs[method] = TvConfig(lam=best, n_iters=args.iters, constraint=constraint)
    reports = comparison.run_comparison(dataset, trained, irf, args.out, tv_configs, methods)
    print(comparison.format_table(reports))


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys set option defaults")


def _add_acquisition(p):
    p.add_argument("--geometry", default="half", help="half, desk[:N], full:N or a geometry .json")
    p.add_argument("--n", type=int, default=256, help="image side length in pixels")
    p.add_argument("--irf-sigma", type=float, default=2.0, help="Gaussian time response width in samples; 0 for ideal")
    p.add_argument("--noise", type=float, default=0.06, help="noise std as a fraction of the peak data value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patrecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a test image")
    p.add_argument("--kind", choices=["vessel", "disk", "point", "gaussian"], default="vessel")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--center", type=float, nargs=2, default=[0.0, -7.5], metavar=("X", "Y"))
    p.add_argument("--size", type=float, default=4.0, help="disk radius or Gaussian sigma in mm")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="sinogram of an image: forward model, time response, noise")
    p.add_argument("--image", required=True)
    p.add_argument("--geometry", default="half")
    p.add_argument("--psf", help="optional image-domain kernel applied before the forward model")
    p.add_argument("--irf-sigma", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct an image from a sinogram")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["ubp", "dal", "tv", "tvpos", "dalnet"], default="ubp")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--irf-sigma", type=float, default=0.0, help="time response assumed by tv/tvpos")
    p.add_argument("--trace", help="CSV file for the per-iteration objective (tv/tvpos)")
    p.add_argument("--checkpoint", help="trained parameters for dalnet")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the learned-weight backprojection network")
    _add_acquisition(p)
    p.add_argument("--dataset", help="dataset directory to load, or to save a generated one in")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.99)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--v-init", choices=["deterministic-dal", "ones"], default="deterministic-dal")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="error measures of reconstructions against references")
    p.add_argument("--recon", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--label", default="recon")
    p.add_argument("--csv")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("psf-estimate", help="image-domain kernel for a Gaussian time response")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--irf-sigma", type=float, default=2.0)
    p.add_argument("--crop", type=int, default=9)
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_psf_estimate)

    p = sub.add_parser("compare", help="UBP, TV, TV with positivity and the trained network on test pairs")
    _add_acquisition(p)
    p.add_argument("--dataset", help="dataset directory (its test split is used when present)")
    p.add_argument("--n-test", type=int, default=4, help="pairs to generate when no dataset is given")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", default=",".join(comparison.METHODS))
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--lambda-sweep", help="lo:hi:n, pick the TV weight with the lowest error")
    p.add_argument("--sweep-pairs", type=int, default=4)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        bad = set(overrides) - known
        if bad:
            parser.error(f"unknown keys in --config: {', '.join(sorted(bad))}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = _parse(parser, argv)
    if getattr(args, "methods", None):
        bad = set(args.methods.split(",")) - set(comparison.METHODS)
        if bad:
            parser.error(f"unknown methods: {', '.join(sorted(bad))}")
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic instead of a traceback
        print(f"patrecon {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
