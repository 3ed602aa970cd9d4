"""Command-line entry point.

Exit codes: 0 success, 1 configuration error or missing input, 2 runtime
failure (including substacks that failed and were skipped).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import pipeline as pl
from .detect import MeanShiftConfig, SeedConfig, detect_substack
from .eval import (f1_confidence_interval, score_detection, stability_report, sweep,
                   sweep_rows, write_sweep_csv)
from .fusion import fuse_views
from .merge import icp_merge, merge_ground_truth
from .phantom import PhantomSpec, generate_phantom, save_phantom
from .registration import MIConfig, RegistrationError, fine_register
from .semdeconv import (TargetSpec, load_net, make_target, predict_volume, save_loss_curve,
                        save_net)
from .volume import (VolumeFormatError, load_markers_csv, load_volume, save_markers_csv,
                     save_volume)

log = logging.getLogger("mvcells")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _config(args) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config) if args.config else pl.PipelineConfig()
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.sd.mode = args.mode
    cfg.validate(require_input=False)
    return cfg


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _floats(text):
    return [float(v) for v in text.split(",") if v]


# ---------------------------------------------------------------------------
# Subcommands

def cmd_phantom(args):
    spec = {}
    if args.spec:
        with open(args.spec) as f:
            spec = json.load(f)
    for key in ("n_somata", "attenuation_length", "noise_sigma", "clutter_density"):
        val = getattr(args, key)
        if val is not None:
            spec[key] = val
    if args.dims:
        spec["dims"] = [int(v) for v in args.dims.split(",")]
    spec["rng_seed"] = args.seed if args.seed is not None else spec.get("rng_seed", 0)
    try:
        ph = generate_phantom(PhantomSpec(**spec))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid phantom spec: {exc}")
    save_phantom(ph, args.out, args.visibility_threshold, args.landmarks)
    log.info("phantom with %d somata written to %s", len(ph.truth), args.out)


def cmd_coarse_register(args):
    cfg = _config(args)
    views, lms = pl.read_phantom_dir(args.input)
    if len(lms) != len(pl.ANGLES):
        raise CLIError("landmark files for all four views are required")
    transforms = pl.coarse_register(lms, cfg.registration, cfg.seed)
    _write_json({str(a): t.to_dict(str(a), "0") for a, t in transforms.items()}, args.out)
    if args.registered:
        for a, vol in pl.register_views(views, transforms).items():
            save_volume(vol, os.path.join(args.registered, f"view_{a:03d}"))


def cmd_fine_register(args):
    cfg = _config(args)
    mi = dataclasses.replace(cfg.registration.mi, seed=cfg.seed)
    t = fine_register(load_volume(args.ref), load_volume(args.test), mi)
    _write_json(t.to_dict("ref", "test"), args.out)


def cmd_fuse(args):
    save_volume(fuse_views(load_volume(args.a), load_volume(args.b), args.window), args.out)


def cmd_make_targets(args):
    dims = load_volume(args.like).dims
    markers = load_markers_csv(args.markers)
    save_volume(make_target(markers, dims, TargetSpec(args.sigma)), args.out)


def cmd_train_sd(args):
    cfg = _config(args)
    if not args.data:
        raise CLIError("at least one --data directory is required")
    nets, curves = pl.train_from_dirs(args.data, [args.kind], cfg)
    save_net(nets[args.kind], args.out)
    if args.curve:
        save_loss_curve(curves[args.kind], args.curve)


def cmd_deconvolve(args):
    net = load_net(args.net)
    b = load_volume(args.b) if args.b else None
    if (b is None) != (net.arity == 1):
        raise CLIError(f"network expects {net.arity} input view(s)")
    save_volume(predict_volume(net, load_volume(args.a), b, stride=args.stride), args.out)


def _detect_cfgs(args, cfg):
    d = cfg.detect
    seed = SeedConfig(args.radius if args.radius is not None else d.radius,
                      args.criterion or d.criterion)
    ms = dataclasses.replace(d.ms_cfg(), bandwidth=args.bandwidth or d.bandwidth)
    return seed, ms


def cmd_detect(args):
    cfg = _config(args)
    seed, ms = _detect_cfgs(args, cfg)
    save_markers_csv(detect_substack(load_volume(args.input), seed, ms), args.out)


def cmd_merge(args):
    a, b = load_markers_csv(args.a), load_markers_csv(args.b)
    if args.method == "icp":
        merged, t = icp_merge(a, b, args.max_dist)
        log.info("icp transform: rotation %.3f deg, translation %s", t.rotation_angle_deg(),
                 np.round(t.translation, 3))
    else:
        merged = merge_ground_truth(a, b, args.max_dist)
    save_markers_csv(merged, args.out)


def cmd_eval(args):
    pred, truth = load_markers_csv(args.pred), load_markers_csv(args.truth)
    score, _ = score_detection(pred, truth, args.cutoff)
    out = {"tp": score.tp, "fp": score.fp, "fn": score.fn, "precision": score.precision,
           "recall": score.recall, "f1": score.f1}
    if score.tp + score.fp + score.fn:
        out["f1_ci"] = list(f1_confidence_interval(score, args.n_mc, args.seed or 0))
    _write_json(out, args.out)


def cmd_sweep(args):
    items = []
    for spec in args.item:
        vol, _, csv = spec.partition(":")
        if not csv:
            raise CLIError(f"--item expects VOLUME_DIR:TRUTH_CSV, got {spec!r}")
        items.append((load_volume(vol), load_markers_csv(csv)))
    result = sweep(lambda v, s, m: detect_substack(v, s, m), _floats(args.r), _floats(args.b),
                   items, args.cutoff)
    write_sweep_csv(args.out, sweep_rows(result, args.label, seed=args.seed or 0))
    sys.stdout.write(stability_report({(args.label, "run"): result}, seed=args.seed or 0))


def cmd_pipeline(args):
    cfg = _config(args)
    if args.input:
        cfg.input_dir = args.input
    if args.output:
        cfg.output_dir = args.output
    for spec in args.net or []:
        kind, _, path = spec.partition("=")
        cfg.sd.nets[kind] = path
    if args.train:
        cfg.train_dirs = list(args.train)
    cfg.validate()
    nets = pl.load_nets(cfg)
    need = [k for k in pl.required_kinds([cfg.sd.mode]) if k not in nets]
    if need:
        if not cfg.train_dirs:
            raise CLIError(f"mode {cfg.sd.mode} needs networks {need}: pass --net or --train")
        trained, _ = pl.train_from_dirs(cfg.train_dirs, need, cfg)
        nets.update(trained)
    summary = pl.run_pipeline(cfg, nets)
    _write_json(summary, None)
    if summary["failed_substacks"]:
        raise CLIError(f"{summary['failed_substacks']} substack(s) failed", EXIT_RUNTIME)


# ---------------------------------------------------------------------------

def _common(default):
    # subcommand copies use SUPPRESS so they do not clobber top-level values
    c = argparse.ArgumentParser(add_help=False, argument_default=default)
    c.add_argument("--config", help="JSON pipeline configuration")
    c.add_argument("--workers", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--mode", choices=list(pl.MODES))
    c.add_argument("-v", "--verbose", action="count")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="mvcells", description=__doc__.splitlines()[0],
                                parents=[_common(None)])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("phantom", cmd_phantom, "generate a synthetic four-view phantom")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec", help="JSON file with PhantomSpec fields")
    sp.add_argument("--dims", help="e.g. 64,64,64")
    sp.add_argument("--n-somata", dest="n_somata", type=int)
    sp.add_argument("--attenuation-length", dest="attenuation_length", type=float)
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    sp.add_argument("--clutter-density", dest="clutter_density", type=float)
    sp.add_argument("--visibility-threshold", type=float, default=0.1)
    sp.add_argument("--landmarks", type=int, default=15)

    sp = add("coarse-register", cmd_coarse_register, "landmark RANSAC registration of all views")
    sp.add_argument("--input", required=True, help="phantom-layout directory")
    sp.add_argument("--out", default="-")
    sp.add_argument("--registered", help="write resampled views here")

    sp = add("fine-register", cmd_fine_register, "mutual-information refinement of a pair")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--out", default="-")

    sp = add("fuse", cmd_fuse, "entropy-weighted fusion of two aligned views")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--window", type=int, default=9)
    sp.add_argument("--out", required=True)

    sp = add("make-targets", cmd_make_targets, "build a deconvolution target volume")
    sp.add_argument("--markers", required=True)
    sp.add_argument("--like", required=True, help="volume whose dims the target takes")
    sp.add_argument("--sigma", type=float, default=3.0)
    sp.add_argument("--out", required=True)

    sp = add("train-sd", cmd_train_sd, "train a deconvolution network on phantom directories")
    sp.add_argument("--data", action="append", required=True)
    sp.add_argument("--kind", choices=["msd", "single", "fused"], default="msd")
    sp.add_argument("--out", required=True)
    sp.add_argument("--curve", help="write the loss curve CSV here")

    sp = add("deconvolve", cmd_deconvolve, "apply a trained network to one or two views")
    sp.add_argument("--net", required=True)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--out", required=True)

    def detect_flags(sp):
        sp.add_argument("--radius", type=float)
        sp.add_argument("--criterion", choices=["soft", "hard"])
        sp.add_argument("--bandwidth", type=float)

    sp = add("detect", cmd_detect, "threshold, seed and mean-shift one volume")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    detect_flags(sp)

    sp = add("merge", cmd_merge, "merge two marker lists")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--method", choices=["icp", "gt"], default="icp")
    sp.add_argument("--max-dist", type=float, default=3.5)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score predictions against truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--cutoff", type=float, default=3.5)
    sp.add_argument("--n-mc", type=int, default=10000)
    sp.add_argument("--out", default="-")

    sp = add("sweep", cmd_sweep, "(r, b) stability sweep over volumes")
    sp.add_argument("--item", action="append", required=True, help="VOLUME_DIR:TRUTH_CSV")
    sp.add_argument("--r", default="0.7,1.0,1.3,1.6,1.9")
    sp.add_argument("--b", default="1.5,2.0,2.5,3.0,3.5")
    sp.add_argument("--cutoff", type=float, default=3.5)
    sp.add_argument("--label", default="run")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "end-to-end run on a phantom-layout directory")
    sp.add_argument("--input")
    sp.add_argument("--output")
    sp.add_argument("--net", action="append", help="KIND=PATH, KIND in msd/single/fused")
    sp.add_argument("--train", action="append", help="training phantom directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as exc:
        log.error("%s", exc)
        return exc.code
    except (pl.ConfigError, FileNotFoundError, VolumeFormatError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (RegistrationError, RuntimeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
