"""Command-line front end.

Every failure is reported as a single machine-parsable stderr line:

    guidancelab: error exit=<code> kind=<ExceptionType>: <message>

Exit codes:
    0  success
    1  runtime failure (training divergence, sampler abort, I/O during a run)
    2  usage error (unknown flags or subcommands; raised by argparse)
    3  unresolvable input path (config, checkpoint, samples, or results file)
    4  invalid configuration or parameter values
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import load_config, resolve_out_dir
from .denoiser import load_checkpoint
from .errors import ConfigError, DivergenceError
from .experiment import (
    build_guidance_spec,
    finetune_cached,
    run_experiment,
    train_base_cached,
    _Log,
    _oracle_seed,
)
from .guidance import GUIDANCE_MODES
from .metrics import metric_report
from .mixtures import resolve_world, restrict, sample
from .reporting import write_report
from .sampler import SamplerConfig, sample_run, save_run_record

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_PATH = 3
EXIT_CONFIG = 4

_EPILOG = __doc__[__doc__.index("Exit codes"):]


class PathError(OSError):
    """An input file or directory that should exist does not."""


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise PathError(f"{what} not found: {path}")
    return path


def _cmd_train(args) -> int:
    cfg = load_config(_require_file(args.config, "config file"))
    out_root = resolve_out_dir(cfg, args.out)
    log = _Log(None if args.quiet else os.path.join(out_root, "checkpoints", "train_log.txt"))
    _, digest, path = train_base_cached(cfg, args.seed, out_root, log)
    print(path)
    print(os.path.join(os.path.dirname(path), f"base_{digest}_loss.csv"))
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = load_config(_require_file(args.config, "config file"))
    out_root = resolve_out_dir(cfg, args.out)
    log = _Log(None if args.quiet else os.path.join(out_root, "checkpoints", "train_log.txt"))
    base_net, base_digest, _ = train_base_cached(cfg, args.seed, out_root, log)
    _, digest, path = finetune_cached(cfg, args.seed, base_net, base_digest, out_root, log)
    print(path)
    print(os.path.join(os.path.dirname(path), f"ft_{digest}_loss.csv"))
    return EXIT_OK


def _cmd_sample(args) -> int:
    net = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    base_net = net
    if args.base_checkpoint is not None:
        base_net = load_checkpoint(_require_file(args.base_checkpoint, "base checkpoint"))
    elif args.mode in ("replacement_cfg", "dual_replacement_cfg"):
        raise ConfigError(f"mode {args.mode} needs --base-checkpoint")
    spec = build_guidance_spec(
        args.mode, base_net, net, args.gamma, args.gamma1, args.gamma2,
        coarse=args.coarse, fine=args.fine,
    )
    record = sample_run(
        SamplerConfig(
            num_steps=args.steps, schedule=net.schedule, spec=spec,
            n_chains=args.chains, seed=args.seed,
            record_trajectory=args.trajectory,
        )
    )
    out = args.out or f"samples_{record.digest}.csv"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    if args.trajectory or out.endswith(".run"):
        save_run_record(record, out)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(record.samples.shape[1])])
            for row in record.samples:
                writer.writerow([repr(float(v)) for v in row])
    print(out)
    return EXIT_OK


def _load_samples_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"samples file {path} is empty")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ConfigError(f"samples file {path} has a header but no rows")
    return np.asarray(rows, dtype=np.float64)


def _cmd_eval(args) -> int:
    samples = _load_samples_csv(_require_file(args.samples, "samples file"))
    world = resolve_world(args.world)
    if args.coarse is not None or args.fine is not None:
        world = restrict(world, args.coarse, args.fine)
    # Sliced W1 pairs sorted projections, so both clouds must be the same size.
    ref_size = args.ref_size if args.ref_size is not None else samples.shape[0]
    ref, _ = sample(world, ref_size, args.ref_seed)
    report = metric_report(samples, world, ref)
    print("metric,value")
    print(f"sliced_w,{report.sliced_w!r}")
    print(f"mmd_rbf,{report.mmd_rbf!r}")
    if report.w1_exact is not None:
        print(f"w1_exact,{report.w1_exact!r}")
    print(f"coverage,{report.coverage!r}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    cfg = load_config(_require_file(args.config, "config file"))
    result = run_experiment(cfg, out_override=args.out)
    print(result.results_path)
    print(result.summary_path)
    return EXIT_OK


def _cmd_report(args) -> int:
    for path in write_report(_require_file(args.results, "results file"), args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidancelab",
        description="Train tiny denoisers on mixture worlds, swap guidance priors, measure the damage.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_out(p):
        p.add_argument("--out", default=None,
                       help="output root (default: $GUIDANCELAB_OUT, then the config's `out`)")

    p = sub.add_parser("train", help="train the base model for one seed (cached by content digest)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--quiet", action="store_true", help="skip the training log file")
    add_out(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune the cached base model on the narrow world")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--quiet", action="store_true")
    add_out(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sample", help="run guided reverse diffusion from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="conditional (fine-tuned) model")
    p.add_argument("--base-checkpoint", default=None,
                   help="unconditional prior for replacement modes")
    p.add_argument("--mode", required=True, choices=GUIDANCE_MODES)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--gamma1", type=float, default=1.5)
    p.add_argument("--gamma2", type=float, default=3.0)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--chains", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--coarse", type=int, default=None)
    p.add_argument("--fine", type=int, default=None)
    p.add_argument("--trajectory", action="store_true",
                   help="write a full run record instead of a samples CSV")
    p.add_argument("--out", default=None, help="output file (default samples_<digest>.csv)")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score a samples CSV against a (restricted) world")
    p.add_argument("--samples", required=True)
    p.add_argument("--world", required=True, help="preset name (ring8, narrow2) or world JSON path")
    p.add_argument("--coarse", type=int, default=None)
    p.add_argument("--fine", type=int, default=None)
    p.add_argument("--ref-seed", type=int, default=0)
    p.add_argument("--ref-size", type=int, default=None,
                   help="reference draw count (default: match the samples file)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run the full sweep from a config file")
    p.add_argument("--config", required=True)
    add_out(p)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="render summary tables and figures from a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None, help="directory for report artifacts (default: beside the results file)")
    p.set_defaults(func=_cmd_report)

    return parser


def _fail(code: int, exc: BaseException) -> int:
    message = " ; ".join(str(exc).splitlines()) or exc.__class__.__name__
    print(f"guidancelab: error exit={code} kind={type(exc).__name__}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PathError, FileNotFoundError) as exc:
        return _fail(EXIT_PATH, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DivergenceError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
