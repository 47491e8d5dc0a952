"""Command line entry point: run, ablate, plot-data, verify."""

from __future__ import annotations

import argparse
import logging
import sys

from . import ablate, plotdata, runner, verify
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_STALE = 3


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.output_dir:
        cfg.output_dir = args.output_dir
    stale = runner.stale_summaries(cfg)
    if stale and not args.force:
        print("existing results were produced by a different config (hash mismatch):",
              file=sys.stderr)
        for p in stale:
            print(f"  {p}", file=sys.stderr)
        print("rerun with --force to overwrite", file=sys.stderr)
        return EXIT_STALE
    results = runner.run_experiment(cfg)
    aborted = [r for r in results if r.aborted]
    for r in results:
        status = f"ABORTED ({r.aborted})" if r.aborted else "ok"
        print(f"{r.method} seed {r.seed}: {status} -> {r.csv_path}")
    return EXIT_FAILED if aborted else EXIT_OK


def cmd_ablate(args) -> int:
    rows = ablate.run_ablation(args.suite, env_size=args.env_size, seeds=args.seeds,
                               total_env_steps=args.budget, output_dir=args.output_dir)
    for row in rows:
        print(f"{row['variant']:>20}  auc {row['median_auc']:.3f}  "
              f"steps-to-0.9 {row['median_steps_to_threshold']}  "
              f"distinct {row['median_distinct_states']}")
    return EXIT_FAILED if any(r["n_aborted"] for r in rows) else EXIT_OK


def cmd_plot_data(args) -> int:
    try:
        written = plotdata.write_plot_data(args.dir, args.out, window=args.window)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {len(written)} files")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_suite(args.suite, seed=args.seed)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recall-traces",
                                     description="Backtracking-model recall traces for RL.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every (method, seed) pair of a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p.add_argument("--force", action="store_true",
                   help="overwrite results produced by a different config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a predefined comparison grid")
    p.add_argument("--suite", required=True, choices=ablate.SUITES)
    p.add_argument("--env-size", type=int, default=15)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--budget", type=int, default=100_000, help="env steps per run")
    p.add_argument("--output-dir", default="runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot-data", help="smoothed curves, seed bands and heatmaps")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", default=None, help="defaults to <dir>/plot-data")
    p.add_argument("--window", type=int, default=10)
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("verify", help="run an identity/oracle suite and print pass/fail")
    p.add_argument("--suite", required=True, choices=verify.SUITES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
