"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed
verification.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import formats, imageio, manifest, network, sensing, solver, tensor, training, verify

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("convcs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _geometry(args):
    if args.preset and args.params:
        raise UsageError("give either --preset or --params, not both")
    if args.preset:
        if args.preset not in sensing.PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(sensing.PRESETS)}")
        return sensing.PRESETS[args.preset]
    if args.params:
        try:
            L, m, s = (int(v) for v in args.params.split(","))
        except ValueError:
            raise UsageError("--params expects L,m,s as three integers") from None
        return L, m, s
    raise UsageError("one of --preset or --params is required")


def cmd_sense(args):
    L, m, s = _geometry(args)
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    try:
        bank = sensing.make_filter_bank(m, L, s, args.seed)
    except sensing.ParameterError as exc:
        raise UsageError(str(exc)) from None
    x = imageio.read_image(args.input)
    if args.precision == 32:
        x = x.astype(np.float32)
        bank = bank.astype(np.float32)
    y = sensing.sense_image(x, bank)
    if args.noise:
        y = sensing.add_noise(y, args.noise, args.seed + 1)
    formats.write_ccsm(args.output, y)
    meta = y.meta
    print(f"achieved rate {meta.achieved_rate:.6f} ({meta.num_measurements} measurements / "
          f"{meta.H}x{meta.W} padded pixels)")
    return EXIT_OK


def _load_net(path, meta):
    cfg, params = network.load_checkpoint(path)
    if (cfg.m, cfg.L, cfg.s) != (meta.m, meta.L, meta.s):
        raise network.ConfigMismatchError(
            f"checkpoint network: {network.describe(cfg)}\n"
            f"measurements: m={meta.m} L={meta.L} s={meta.s} seed={meta.seed}"
        )
    if cfg.sensing_seed != meta.seed:
        print(f"warning: checkpoint filters were seeded with {cfg.sensing_seed}, measurements with {meta.seed}",
              file=sys.stderr)
    return cfg, params


def cmd_reconstruct(args):
    y = formats.read_ccsm(args.input)
    meta = y.meta
    if args.method == "net":
        if not args.checkpoint:
            raise UsageError("--method net needs --checkpoint")
        cfg, params = _load_net(args.checkpoint, meta)
        x = network.forward(y, params, cfg)
    else:
        bank = sensing.bank_from_meta(meta)
        y64 = sensing.MeasurementSet(maps=y.maps.astype(np.float64), meta=meta)
        if args.method == "adjoint":
            x = sensing.initial_estimate(y64, bank)
        else:
            try:
                cfg = solver.SolverConfig(eta=args.eta, delta=args.delta, tau=args.tau,
                                          regularizer=args.regularizer, max_iters=args.max_iters,
                                          rel_tol=args.rel_tol, step_mode=args.step_mode)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            x, trace = solver.reconstruct_iterative(y64, bank, cfg=cfg, trace_path=args.trace)
            if trace:
                print(f"{len(trace)} iterations, objective {trace[-1][1]:.6g}, last change {trace[-1][2]:.3g}")
    imageio.write_pgm(args.output, tensor.crop(x, meta.pads))
    return EXIT_OK


def cmd_verify(args):
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        result = verify.run(name)
        print(result.summary())
        for failure in result.failures:
            print(f"  {failure}")
        ok = ok and result.ok
    return EXIT_OK if ok else EXIT_VERIFY


def run_train(m):
    """Train from a manifest; returns the run directory."""
    g = lambda key: manifest.setting(m, key)  # noqa: E731
    L, mm, s = m.geometry()
    try:
        net_cfg = network.NetConfig(m=mm, L=L, s=s, stages=g("stages"), depth=g("depth"), width=g("width"),
                                    init_seed=g("init_seed"), sensing_seed=g("sensing_seed"),
                                    tap_mode=g("tap_mode"), fill_offset=g("fill_offset"))
        train_cfg = training.TrainConfig(minibatch=g("minibatch"), lr0=g("lr0"), halve_every=g("halve_every"),
                                         max_updates=g("max_updates"), eval_every=g("eval_every"),
                                         seed=g("seed"), train_sensing=g("train_sensing"))
    except ValueError as exc:
        raise manifest.ManifestError(str(exc)) from None
    run_dir = m.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    data = m.path("data")
    if data is None:
        if not g("synthetic_images"):
            raise manifest.ManifestError("need data = <directory> or synthetic_images = <count>")
        data = os.path.join(run_dir, "data")
        training.write_synthetic_images(data, g("synthetic_images"), g("synthetic_size"), seed=g("seed"))
    elif not os.path.isdir(data):
        raise manifest.ManifestError(f"data directory {data} does not exist")
    dataset = training.PatchDataset(data, patch_size=g("patch_size"), flips=g("flips"), rotations=g("rotations"),
                                    seed=g("split_seed"), heldout_fraction=g("heldout_fraction"))
    patches = dataset.training_patches(g("patches"))
    with open(os.path.join(run_dir, "manifest.txt"), "w") as fh:
        fh.write(m.canonical())
    with open(os.path.join(run_dir, "heldout.txt"), "w") as fh:
        fh.writelines(f"{os.path.basename(p)}\n" for p in dataset.heldout_files)
    training.train(patches, net_cfg, train_cfg, out_dir=run_dir)
    return run_dir


def _image_list(directory):
    if not os.path.isdir(directory):
        raise manifest.ManifestError(f"image directory {directory} does not exist")
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith((".pgm", ".png")))
    return [(f, imageio.read_image(os.path.join(directory, f))) for f in names]


def run_eval(m):
    """Evaluate from a manifest; returns ``(run_dir, report)``."""
    g = lambda key: manifest.setting(m, key)  # noqa: E731
    if m.get("images") is None:
        raise manifest.ManifestError("eval manifest needs images = <directory>")
    images = _image_list(m.path("images"))
    presets = g("presets") or ("rate0.05-corrected", "rate0.1", "rate0.2", "rate0.3")
    for p in presets:
        if p not in sensing.PRESETS:
            raise manifest.ManifestError(f"unknown preset {p!r}")
    for method in g("methods"):
        if method not in ("iterative", "adjoint", "net"):
            raise manifest.ManifestError(f"unknown method {method!r}")
    try:
        cfg = solver.SolverConfig(eta=g("eta"), delta=g("delta"), tau=g("tau"), regularizer=g("regularizer"),
                                  max_iters=g("max_iters"), rel_tol=g("rel_tol"), step_mode=g("step_mode"))
    except ValueError as exc:
        raise manifest.ManifestError(str(exc)) from None
    checkpoints = {k.split(".", 1)[1]: m.path(k) for k in m.values if k.startswith("checkpoint.")}
    report = training.evaluate(images, g("methods"), presets, g("noise"), g("seeds"), checkpoints, cfg)
    run_dir = m.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "manifest.txt"), "w") as fh:
        fh.write(m.canonical())
    report.write_csv(os.path.join(run_dir, "report.csv"))
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    return run_dir, report


def cmd_train(args):
    run_dir = run_train(manifest.load(args.manifest, "train"))
    print(f"run directory {run_dir}")
    return EXIT_OK


def cmd_eval(args):
    run_dir, report = run_eval(manifest.load(args.manifest, "eval"))
    print(report.table())
    print(f"run directory {run_dir}")
    return EXIT_DATA if report.errors else EXIT_OK


def build_parser():
    parser = _Parser(prog="convcs", description="Convolutional compressive sensing toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sense", help="measure an image and write a .ccsm file")
    p.add_argument("input", help="8-bit grayscale PGM (P5) or PNG image")
    p.add_argument("--preset", help=f"one of {', '.join(sensing.PRESETS)}")
    p.add_argument("--params", help="explicit geometry as L,m,s")
    p.add_argument("--noise", type=float, default=0.0, help="measurement noise std on the 0-255 scale")
    p.add_argument("--seed", type=int, default=0, help="filter-bank seed (noise uses seed + 1)")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sense)

    p = sub.add_parser("reconstruct", help="reconstruct an image from a .ccsm file")
    p.add_argument("input")
    p.add_argument("--method", choices=("adjoint", "ista", "net"), default="ista")
    p.add_argument("--checkpoint", help=".ccsn checkpoint for --method net")
    p.add_argument("--trace", help="write the objective trace here (ista)")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=400)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--regularizer", choices=("l1", "nonneg"), default="l1")
    p.add_argument("--step-mode", choices=("backtracking", "fixed"), default="backtracking")
    p.add_argument("-o", "--output", required=True, help="output PGM")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("verify", help="run a numerical verification suite")
    p.add_argument("--suite", choices=(*verify.SUITES, "all"), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train a network from a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a PSNR evaluation sweep from a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_eval)
    return parser


_DATA_ERRORS = (
    OSError,
    imageio.ImageFormatError,
    formats.FormatError,
    manifest.ManifestError,
    network.CheckpointFormatError,
    network.ConfigMismatchError,
    sensing.MetaMismatchError,
    tensor.DimensionError,
    training.TrainingDiverged,
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"convcs {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"convcs {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
