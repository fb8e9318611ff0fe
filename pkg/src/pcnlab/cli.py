"""Command-line entry point: run, summarize, diagnose.

    pcnlab run --condition c1-det-pc --scale desk --dataset synthetic --out runs/c1
    pcnlab summarize runs/c1 runs/c5 --out runs/summary
    pcnlab diagnose --checkpoint runs/c1/checkpoint_ep3.pcn --dataset synthetic --out runs/diag

The dataset root comes from --dataset-path or $PCNLAB_DATA_ROOT when the
source is cifar10; --config loads an INI file whose values sit between the
condition preset and the CLI flags.
"""

from __future__ import annotations

import argparse
import sys

from .config import CONDITIONS, ConfigError, build_config, parse_config_file
from .runner import RunError, run
from .reports import summarize


def _add_run_flags(p: argparse.ArgumentParser, *, need_condition: bool) -> None:
    if need_condition:
        p.add_argument("--condition", "-c", required=True, choices=CONDITIONS)
    p.add_argument("--config", help="INI config file (flags override it)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", dest="data_source", choices=("cifar10", "synthetic"))
    p.add_argument("--dataset-path", dest="data_path",
                   help="CIFAR-10 binary batch directory (or $PCNLAB_DATA_ROOT)")
    p.add_argument("--subset", type=int, help="training records to use")
    p.add_argument("--eval-n", dest="eval_n", type=int)
    p.add_argument("--eval-sigma", dest="eval_sigmas",
                   help="comma list of eval noise levels, e.g. 0,1e-3,1e-2")
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--scale", choices=("full", "desk", "ci"), default="full")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="record determinism provenance (runs are seeded either way)")


def _build_from_args(args, condition: str):
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {k: v for k, v in vars(args).items()
                 if k in ("epochs", "seed", "data_source", "data_path", "subset",
                          "eval_n", "eval_sigmas", "out_dir", "deterministic",
                          "checkpoint") and v is not None}
    return build_config(condition, scale=args.scale, file_values=file_values,
                        overrides=overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pcnlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment condition")
    _add_run_flags(p_run, need_condition=True)

    p_sum = sub.add_parser("summarize", help="gap table across completed runs")
    p_sum.add_argument("run_dirs", nargs="+")
    p_sum.add_argument("--out", dest="out_dir", default="runs/summary")

    p_diag = sub.add_parser("diagnose", help="inference no-op report (c2)")
    _add_run_flags(p_diag, need_condition=False)
    p_diag.add_argument("--checkpoint", help="model checkpoint to diagnose "
                        "(default: fresh seed-initialised model)")

    args = parser.parse_args(argv)

    if args.command == "summarize":
        gap_rows, errors = summarize(args.run_dirs, args.out_dir)
        with open(f"{args.out_dir}/gap_summary.txt") as fh:
            sys.stdout.write(fh.read())
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 1 if errors and not gap_rows else 0

    condition = args.condition if args.command == "run" else "c2-diagnose"
    try:
        cfg = _build_from_args(args, condition)
        if cfg.out_dir == "runs/out" and args.out_dir is None:
            cfg.out_dir = f"runs/{condition}"
        result = run(cfg)
    except (ConfigError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for row in result.rows:
        sigma = "" if row["sigma"] is None else f" sigma={row['sigma']:g}"
        auroc = "undefined" if row["auroc2"] is None else f"{row['auroc2']:.4f}"
        print(f"[{row['condition']}] epoch {row['epoch']} {row['probe']}{sigma}: "
              f"acc={row['accuracy']:.4f} auroc2={auroc}")
    print(f"artifacts: {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
