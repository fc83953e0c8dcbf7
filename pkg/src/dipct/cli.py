"""``dipct`` command-line entry point.

Subcommands: generate-data, reconstruct, train, benchmark, report.  Every
subcommand accepts ``--config FILE`` (JSON, keys named like the long flags),
``--show-config``, ``--jobs`` and ``--out``.  Outputs are staged in a scratch
directory and only moved under ``--out`` once the run succeeded, so a failed
run leaves nothing behind.  Progress goes to stderr, output paths to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .datasim import PROFILES, load_dataset, make_dataset, profile_setup, save_dataset
from .operator import ParallelGeometry

log = logging.getLogger("dipct")

RECON_METHODS = ("fbp", "tv", "dip", "diptv", "dip-init")


class CliError(RuntimeError):
    pass


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, help="JSON file with option values; flags override it")
    g.add_argument("--show-config", action="store_true", help="print the resolved options as JSON and exit")
    g.add_argument("--jobs", type=int, default=_default_jobs(), help="worker processes (default: available cores)")
    g.add_argument("--out", type=Path, help="output directory (train: checkpoint file)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dipct", description="Deep-image-prior CT reconstruction toolkit.")
    parser.add_argument("--version", action="version", version=f"dipct {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate-data", parents=[common], help="simulate a phantom/sinogram dataset")
    g.add_argument("--profile", choices=sorted(PROFILES), default="ellipses")
    g.add_argument("--train", type=int, default=32)
    g.add_argument("--val", type=int, default=3)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=None)
    g.add_argument("--max-ellipses", type=int, default=10)

    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct one sinogram")
    r.add_argument("--method", choices=RECON_METHODS)
    src = r.add_argument_group("input (a dataset pair or a raw sinogram)")
    src.add_argument("--data", type=Path, help="dataset directory")
    src.add_argument("--split", default="test", choices=("train", "validation", "test"))
    src.add_argument("--index", type=int, default=0)
    src.add_argument("--input", type=Path, help="sinogram in the binary float32 format")
    src.add_argument("--gt", type=Path, help="ground truth image, enables PSNR/SSIM in the trace")
    src.add_argument("--profile", choices=sorted(PROFILES), default="ellipses", help="geometry for --input")
    r.add_argument("--alpha", type=float, default=None, help="TV weight (tv, diptv, dip-init)")
    r.add_argument("--iters", type=int, default=None, help="iteration budget")
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--filter", choices=("ram-lak", "hann"), default="hann")
    r.add_argument("--frequency-scaling", type=float, default=0.6)
    r.add_argument("--channels", type=int, default=32)
    r.add_argument("--scales", type=int, default=5)
    r.add_argument("--skip", type=int, choices=(0, 4), default=4)
    r.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    r.add_argument("--init-from", default="fbp", help="dip-init start: fbp, tv, an image .bin or a fbp-unet checkpoint")
    r.add_argument("--init-iters", type=int, default=1000)
    r.add_argument("--stop-delta", type=float, default=None, help="dip-init residual target (default: estimated noise level)")
    r.add_argument("--trace-every", type=int, default=50)
    r.add_argument("--snapshot-every", type=int, default=0, help="write a PNG every N trace steps (0: off)")

    t = sub.add_parser("train", parents=[common], help="train the learned post-processing network")
    t.add_argument("--method", choices=("fbp-unet",), default="fbp-unet")
    t.add_argument("--data", type=Path, required=False)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--scales", type=int, default=4)
    t.add_argument("--max-train", type=int, default=None, help="use only the first N training pairs")

    b = sub.add_parser("benchmark", parents=[common], help="run a benchmark spec")
    b.add_argument("--spec", type=Path, required=False, help="JSON benchmark spec")
    b.add_argument("--omit-timing", action="store_true", help="write 0 for time_per_recon so reports are byte-stable")

    p = sub.add_parser("report", parents=[common], help="plot an existing report CSV")
    p.add_argument("--in", dest="input", type=Path, required=False)
    p.add_argument("--plot", type=Path, required=False)
    return parser


# -- config handling --------------------------------------------------------


def _resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in subparser._actions}
    unknown = sorted(k for k in (k.replace("-", "_") for k in cfg) if k not in dests)
    if unknown:
        parser.error(f"unknown config keys for {args.command}: {unknown}")
    path_dests = {a.dest for a in subparser._actions if a.type is Path}
    subparser.set_defaults(
        **{k.replace("-", "_"): (Path(v) if k.replace("-", "_") in path_dests and v is not None else v) for k, v in cfg.items()}
    )
    return parser.parse_args(argv)


def _config_dict(args) -> dict:
    skip = {"command", "config", "show_config", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise CliError(f"--{n.replace('_', '-')} is required")


# -- staging and manifests -------------------------------------------------


class Stage:
    """Scratch directory whose files are moved to ``dest`` on commit."""

    def __init__(self, dest: Path):
        self.dest = Path(dest)
        self.dest.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".dipct-", dir=self.dest.parent))

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def commit(self) -> list[Path]:
        self.dest.mkdir(parents=True, exist_ok=True)
        moved = []
        for src in sorted(self.tmp.rglob("*")):
            if src.is_file():
                target = self.dest / src.relative_to(self.tmp)
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, target)
                moved.append(target)
        self.discard()
        return moved

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _versions() -> dict:
    import scipy
    import torch

    return {
        "dipct": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def _hash_tree(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = io.sha256_file(p)
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    out[str(f)] = io.sha256_file(f)
    return out


def _write_manifest(stage: Stage, args, inputs, timings: dict, seeds: dict, name="run_manifest.json"):
    outputs = {}
    for f in sorted(stage.tmp.rglob("*")):
        if f.is_file():
            outputs[str(f.relative_to(stage.tmp))] = io.sha256_file(f)
    manifest = {
        "command": args.command,
        "config": _config_dict(args),
        "seeds": seeds,
        "versions": _versions(),
        "timings": timings,
        "inputs": _hash_tree(inputs),
        "outputs": outputs,
    }
    stage.path(name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- subcommands -----------------------------------------------------------


def cmd_generate(args) -> list[Path]:
    _require(args, "out")
    t0 = time.perf_counter()
    ds = make_dataset(args.train, args.val, args.test, args.profile, args.seed, args.image_size, max_ellipses=args.max_ellipses)
    stage = Stage(args.out)
    try:
        save_dataset(ds, stage.tmp)
        _write_manifest(stage, args, [], {"generate": time.perf_counter() - t0}, {"dataset": args.seed})
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    log.info("wrote %d/%d/%d pairs", args.train, args.val, args.test)
    return [args.out]


def _load_input(args):
    if args.data is not None:
        if args.input is not None:
            raise CliError("give either --data or --input, not both")
        if not (args.data / "manifest.json").is_file():
            raise CliError(f"no dataset at {args.data}")
        ds = load_dataset(args.data, splits=(args.split,))
        pairs = ds.split(args.split)
        if not 0 <= args.index < len(pairs):
            raise CliError(f"index {args.index} outside the {args.split} split of {len(pairs)} pairs")
        pair = pairs[args.index]
        return pair.observation, ds.geometry, ds.noise, pair.ground_truth, [args.data / "manifest.json"]
    if args.input is None:
        raise CliError("an input is required: --data DIR or --input SINOGRAM")
    if not args.input.is_file():
        raise CliError(f"input {args.input} does not exist")
    y = io.load_array(args.input)
    geom, noise = profile_setup(args.profile)
    if y.shape != geom.sino_shape:
        # raw sinograms of other sizes: keep the profile's angle/detector layout rules
        raise CliError(f"sinogram shape {y.shape} does not match the {args.profile} geometry {geom.sino_shape}")
    gt = None
    inputs = [args.input]
    if args.gt is not None:
        if not args.gt.is_file():
            raise CliError(f"ground truth {args.gt} does not exist")
        gt = io.load_array(args.gt)
        inputs.append(args.gt)
    return y, geom, noise, gt, inputs


def _initial_image(args, y, geom: ParallelGeometry, noise):
    from .fbp import FbpFilter, fbp_reconstruct
    from .postproc import apply_postprocessor, load_postprocessor
    from .variational import Discrepancy, TvConfig, tv_reconstruct

    src = args.init_from
    if src == "fbp":
        return fbp_reconstruct(y, geom, FbpFilter(args.filter, args.frequency_scaling)), []
    if src == "tv":
        cfg = TvConfig(alpha=args.alpha if args.alpha is not None else 1.0, iterations=500)
        return tv_reconstruct(y, geom, Discrepancy.for_noise(noise), cfg).image, []
    path = Path(src)
    if not path.is_file():
        raise CliError(f"--init-from {src}: not fbp, tv or an existing file")
    with path.open("rb") as f:
        head = f.read(8)
    if head == io.MAGIC:
        return io.load_array(path), [path]
    params, filt = load_postprocessor(path)
    return apply_postprocessor(params, y, geom, filt), [path]


def cmd_reconstruct(args) -> list[Path]:
    from .dip import DipConfig, dip_reconstruct, dip_with_initial, diptv_reconstruct
    from .datasim import noise_level
    from .fbp import FbpFilter, fbp_reconstruct
    from .metrics import psnr, ssim
    from .nn import NetworkConfig
    from .result import ReconstructionResult
    from .variational import Discrepancy, TvConfig, tv_reconstruct

    _require(args, "method", "out")
    y, geom, noise, gt, inputs = _load_input(args)
    disc = Discrepancy.for_noise(noise)
    t0 = time.perf_counter()
    m = args.method
    if m == "fbp":
        image = fbp_reconstruct(y, geom, FbpFilter(args.filter, args.frequency_scaling))
        result = ReconstructionResult(image, "fbp")
    elif m == "tv":
        cfg = TvConfig(
            alpha=args.alpha if args.alpha is not None else 1.0,
            iterations=args.iters or 500,
            trace_every=args.trace_every,
        )
        result = tv_reconstruct(y, geom, disc, cfg, gt=gt)
    else:
        net = NetworkConfig(
            args.scales, args.channels, (args.skip,) * args.scales, output_size=geom.image_size, dtype=args.dtype
        )
        alpha = 0.0 if m == "dip" else (args.alpha if args.alpha is not None else 1.0)
        stop = args.stop_delta
        if m == "dip-init" and stop is None:
            stop = noise_level(noise, y)
        cfg = DipConfig(
            net=net,
            lr=args.lr,
            iterations=args.iters or (1000 if m == "dip-init" else 2000),
            alpha=alpha,
            discrepancy=disc,
            seed=args.seed,
            trace_every=args.trace_every,
            stop_delta=stop,
            init_iterations=args.init_iters,
            keep_snapshots=args.snapshot_every > 0,
        )
        if m == "dip":
            result = dip_reconstruct(y, geom, cfg, gt=gt)
        elif m == "diptv":
            result = diptv_reconstruct(y, geom, cfg, gt=gt)
        else:
            x0, extra_inputs = _initial_image(args, y, geom, noise)
            inputs = inputs + extra_inputs
            result = dip_with_initial(y, geom, x0, cfg, gt=gt)
    elapsed = time.perf_counter() - t0

    stage = Stage(args.out)
    try:
        io.save_array(stage.path("recon.bin"), result.image)
        io.save_png(stage.path("recon.png"), result.image, 0.0, 1.0)
        io.save_pgm(stage.path("recon.pgm"), result.image, 0.0, 1.0)
        if result.trace:
            result.write_trace_csv(stage.path("trace.csv"))
        snaps = result.info.get("snapshots", {})
        if args.snapshot_every > 0:
            for k, it in enumerate(sorted(snaps)):
                if k % args.snapshot_every == 0 or it == max(snaps):
                    io.save_png(stage.path(f"snapshots/iter_{it:06d}.png"), snaps[it], 0.0, 1.0)
        quality = {}
        if gt is not None:
            quality = {"psnr": psnr(result.image, gt), "ssim": ssim(result.image, gt)}
            log.info("psnr %.2f dB, ssim %.4f", quality["psnr"], quality["ssim"])
        timings = {"reconstruct": elapsed, "iterations_run": result.iterations_run}
        for key in ("init_wall_time", "radon_wall_time"):
            if key in result.info:
                timings[key] = result.info[key]
        _write_manifest(stage, args, inputs, timings, {"network": args.seed})
        stage.path("metrics.json").write_text(json.dumps(quality, sort_keys=True) + "\n")
        files = stage.commit()
    except BaseException:
        stage.discard()
        raise
    return [f for f in files if f.name in ("recon.bin", "recon.png", "trace.csv")]


def cmd_train(args) -> list[Path]:
    from .nn import NetworkConfig
    from .postproc import TrainConfig, train_postprocessor

    _require(args, "out", "data")
    if not (args.data / "manifest.json").is_file():
        raise CliError(f"no dataset at {args.data}")
    ds = load_dataset(args.data, splits=("train", "validation"))
    if args.max_train is not None:
        ds.train = ds.train[: args.max_train]
    if not ds.train:
        raise CliError("the dataset has no training pairs")
    net = NetworkConfig(
        args.scales, args.channels, (4,) * args.scales, output_size=ds.geometry.image_size, dtype="float32"
    )
    out = Path(args.out)
    stage = Stage(out.parent)
    try:
        cfg = TrainConfig(
            net=net,
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            seed=args.seed,
            checkpoint=str(stage.path(out.name)),
        )
        t0 = time.perf_counter()
        _, tlog = train_postprocessor(ds, cfg)
        lines = ["epoch,train_mse,val_mse"] + [
            f"{e.epoch},{e.train_mse!r},{'' if e.val_mse is None else repr(e.val_mse)}" for e in tlog.epochs
        ]
        stage.path(out.stem + "_log.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(
            stage,
            args,
            [args.data / "manifest.json"],
            {"train": time.perf_counter() - t0, "best_epoch": tlog.best_epoch},
            {"network": args.seed},
            name=out.stem + "_manifest.json",
        )
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    return [out]


def cmd_benchmark(args) -> list[Path]:
    from .bench import BenchmarkSpec, render_report, run_benchmark

    _require(args, "spec", "out")
    if not args.spec.is_file():
        raise CliError(f"benchmark spec {args.spec} does not exist")
    try:
        spec = BenchmarkSpec.from_dict(json.loads(args.spec.read_text()))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CliError(f"invalid benchmark spec: {exc}") from exc
    t0 = time.perf_counter()
    report = run_benchmark(spec, jobs=args.jobs)
    if report.failures:
        raise CliError("benchmark cells failed: " + "; ".join(report.failures))
    per_cell = {f"{r.method}@{r.size}": r.time_per_recon for r in report.rows}
    if args.omit_timing:
        for r in report.rows:
            r.time_per_recon = 0.0
    stage = Stage(args.out)
    try:
        render_report(report, stage.tmp)
        _write_manifest(
            stage,
            args,
            [args.spec],
            {"benchmark": time.perf_counter() - t0, "per_cell": per_cell},
            {"dataset": spec.seed},
        )
        files = stage.commit()
    except BaseException:
        stage.discard()
        raise
    return [f for f in files if f.suffix in (".csv", ".png")]


def cmd_report(args) -> list[Path]:
    from .bench import parse_report_csv, plot_report

    _require(args, "input", "plot")
    if not args.input.is_file():
        raise CliError(f"report {args.input} does not exist")
    try:
        report = parse_report_csv(args.input.read_text())
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if not report.rows:
        raise CliError("report has no rows")
    plot = Path(args.plot)
    if args.out is not None:
        plot = args.out / plot.name
    stage = Stage(plot.parent)
    try:
        plot_report(report, stage.path(plot.name))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    return [plot]


COMMANDS = {
    "generate-data": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.show_config:
        print(json.dumps(_config_dict(args), indent=2, sort_keys=True))
        return 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log.setLevel(logging.INFO)
    if not logging.getLogger().handlers:
        logging.getLogger().addHandler(logging.StreamHandler(sys.stderr))
    try:
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        outputs = COMMANDS[args.command](args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"dipct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected failures are still a clean exit 1
        log.exception("unexpected failure")
        print(f"dipct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
