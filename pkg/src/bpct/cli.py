"""Command-line entry point.

Subcommands: phantom, drr, train, eval, reconstruct, gradcheck, slices.
Exit codes: 0 ok, 1 argument or file-IO error, 2 validation error,
3 gradient check over tolerance. BPCT_THREADS caps the threads used by
numpy's backing libraries (0 or unset leaves the default).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import gan, trainkit
from .attention import gradcheck_cases as attention_cases
from .autodiff.gradcheck import primitive_cases, run_cases
from .gan import gradcheck_cases as gan_cases
from .projector import ProjectionModel, project
from .trainkit import ConfigError, TrainConfig, TrainingDiverged, apply_overrides
from .volcore import (DrrImage, FormatError, View, load_drr, load_volume,
                      make_phantom, random_spec, save_drr, save_volume,
                      to_pgm_bytes)
from .vqbridge import gradcheck_cases as vq_cases


class _ExitCode:
    OK = 0
    USAGE = 1
    VALIDATION = 2
    GRADCHECK = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the documented code for that is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(_ExitCode.USAGE)


def _build_parser():
    top = _Parser(prog="bpct",
                  description="Biplanar projection CT reconstruction toolkit.")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic ellipsoid volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--dims", type=int, default=16, help="cubic edge length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ellipsoids", type=int, default=5)

    p = sub.add_parser("drr", help="project a volume to frontal + lateral images")
    p.add_argument("--vol", required=True)
    p.add_argument("--model", choices=("mean", "beer"), default="mean")
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pgm", action="store_true", help="also write 8-bit previews")

    p = sub.add_parser("train", help="train a generator per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("eval", help="score a checkpoint against a volume directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory of .ctvol files")
    p.add_argument("--model", choices=("mean", "beer"), default="mean")
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--out", help="also write the CSV report here")

    p = sub.add_parser("reconstruct", help="volume from a frontal + lateral pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frontal", required=True)
    p.add_argument("--lateral", required=True)
    p.add_argument("--out", required=True, help="output .ctvol path")

    p = sub.add_parser("gradcheck", help="finite-difference check the autodiff ops")
    p.add_argument("--suite", default="all",
                   help="'all' or one case name from the table")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("slices", help="export volume slices as PGM images")
    p.add_argument("--vol", required=True)
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--out", required=True, help="output directory")
    return top


def _cmd_phantom(args):
    if args.dims < 4:
        print(f"bpct phantom: --dims must be >= 4, got {args.dims}", file=sys.stderr)
        return _ExitCode.VALIDATION
    if args.count < 1 or args.ellipsoids < 1:
        print("bpct phantom: --count and --ellipsoids must be >= 1", file=sys.stderr)
        return _ExitCode.VALIDATION
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = random_spec(args.dims, args.ellipsoids, args.seed + i)
        path = os.path.join(args.out, f"phantom_{i}.ctvol")
        save_volume(make_phantom(spec), path)
        print(path)
    return _ExitCode.OK


def _cmd_drr(args):
    vol = load_volume(args.vol)
    model = ProjectionModel(args.model, args.mu)
    os.makedirs(args.out, exist_ok=True)
    for view, name in ((View.FRONTAL, "frontal"), (View.LATERAL, "lateral")):
        img = project(vol, view, model)
        path = os.path.join(args.out, f"drr_{name}.drr")
        save_drr(img, path)
        print(path)
        if args.pgm:
            pgm = os.path.join(args.out, f"drr_{name}.pgm")
            with open(pgm, "wb") as fh:
                fh.write(to_pgm_bytes(img.data))
            print(pgm)
    return _ExitCode.OK


def _cmd_train(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = trainkit.parse_config_text(fh.read())
    cfg = apply_overrides(cfg, args.set).validate()
    res = trainkit.train(cfg, args.out)
    print(f"steps: {res.steps}")
    print(f"final generator loss: {res.last_parts['total_g']:.6f}")
    print(res.metrics_path)
    print(res.checkpoint_path)
    if res.disc_checkpoint_path:
        print(res.disc_checkpoint_path)
    return _ExitCode.OK


def _load_eval_samples(data_dir, model):
    names = sorted(f for f in os.listdir(data_dir) if f.endswith(".ctvol"))
    if not names:
        raise FileNotFoundError(f"no .ctvol files in {data_dir!r}")
    samples = []
    for name in names:
        vol = load_volume(os.path.join(data_dir, name))
        f = project(vol, View.FRONTAL, model)
        l = project(vol, View.LATERAL, model)
        samples.append(trainkit.Sample(vol.data, f.data, l.data, -1))
    return samples


def _cmd_eval(args):
    genm = gan.load_checkpoint(args.ckpt)
    if genm.kind == "disc":
        print("bpct eval: checkpoint holds a discriminator, not a generator",
              file=sys.stderr)
        return _ExitCode.VALIDATION
    model = ProjectionModel(args.model, args.mu)
    samples = _load_eval_samples(args.data, model)
    mean_p, mean_s, n, _ = trainkit.evaluate(genm, samples)
    rows = [(trainkit.method_name(genm.kind), mean_p, mean_s, n)]
    header = ("method", "psnr_db", "ssim", "n")
    table = [header] + [(m, f"{p:.4f}", f"{s:.4f}", str(n)) for m, p, s, n in rows]
    widths = [max(len(r[c]) for r in table) for c in range(4)]
    for r in table:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    if args.out:
        trainkit.write_eval_csv(rows, args.out)
        print(args.out)
    return _ExitCode.OK


def _cmd_reconstruct(args):
    genm = gan.load_checkpoint(args.ckpt)
    if genm.kind == "disc":
        print("bpct reconstruct: checkpoint holds a discriminator, not a generator",
              file=sys.stderr)
        return _ExitCode.VALIDATION
    drr_f = load_drr(args.frontal)
    drr_l = load_drr(args.lateral)
    vol = trainkit.reconstruct(genm, drr_f, drr_l)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_volume(vol, args.out)
    print(args.out)
    return _ExitCode.OK


def _cmd_gradcheck(args):
    cases = (primitive_cases() + attention_cases() + vq_cases() + gan_cases())
    composed = {"PositionAttention", "ChannelAttention", "GuidedBlock",
                "SemanticRecon", "VqCodebookLoss", "VqCommitment", "FeatureLift",
                "GeneratorGaStep", "VqDecoderPath", "VqEncoderCommit",
                "ProjectionLoss", "PerceptualLoss", "DiscriminatorLsgan"}
    if args.suite != "all":
        cases = [c for c in cases if c[0] == args.suite]
        if not cases:
            print(f"bpct gradcheck: unknown case {args.suite!r}", file=sys.stderr)
            return _ExitCode.VALIDATION
    reports = run_cases(cases, seed=args.seed, eps=args.eps, max_coords_per_leaf=3)
    width = max(len(r.name) for r in reports)
    failed = 0
    for r in reports:
        tol = 1e-3 if r.name in composed else 1e-4
        ok = r.max_rel_err < tol
        failed += not ok
        print(f"{r.name.ljust(width)}  max_rel_err {r.max_rel_err:.3e}  "
              f"tol {tol:.0e}  coords {r.n_coords}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"{failed} case(s) over tolerance", file=sys.stderr)
        return _ExitCode.GRADCHECK
    return _ExitCode.OK


def _cmd_slices(args):
    vol = load_volume(args.vol)
    os.makedirs(args.out, exist_ok=True)
    arr = np.moveaxis(vol.data, args.axis, 0)
    for i in range(arr.shape[0]):
        path = os.path.join(args.out, f"slice_{args.axis}_{i:04d}.pgm")
        with open(path, "wb") as fh:
            fh.write(to_pgm_bytes(np.clip(arr[i], 0.0, 1.0)))
        print(path)
    return _ExitCode.OK


_COMMANDS = {
    "phantom": _cmd_phantom,
    "drr": _cmd_drr,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "reconstruct": _cmd_reconstruct,
    "gradcheck": _cmd_gradcheck,
    "slices": _cmd_slices,
}


def _apply_thread_cap():
    raw = os.environ.get("BPCT_THREADS", "0").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BPCT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"BPCT_THREADS must be >= 0, got {n}")
    if n:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"bpct {args.command}: {e}", file=sys.stderr)
        return _ExitCode.VALIDATION
    except TrainingDiverged as e:
        print(f"bpct {args.command}: training diverged: {e}", file=sys.stderr)
        return _ExitCode.VALIDATION
    except FormatError as e:
        print(f"bpct {args.command}: {e}", file=sys.stderr)
        return _ExitCode.USAGE
    except OSError as e:
        print(f"bpct {args.command}: {e}", file=sys.stderr)
        return _ExitCode.USAGE


if __name__ == "__main__":
    sys.exit(main())
