"""Command line entry point: ``clhpo run|report|grad-check|ledger-check``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from clhpo.neural import gradient_check
from clhpo.runner import ConfigError, execute, parse_config, report, with_seed_override

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
GRAD_TOLERANCE = 1e-5


def _cmd_run(args) -> int:
    try:
        plan = parse_config(args.config)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed_override is not None:
        plan = with_seed_override(plan, args.seed_override)
    if args.output:
        plan.output = Path(args.output)
    index_path = execute(plan, jobs=args.jobs, dump_buffer=args.dump_buffer)
    index = json.loads(index_path.read_text())
    print(f"{index['n_runs'] - index['n_failed']}/{index['n_runs']} runs ok; index at {index_path}")
    for entry in index["runs"]:
        if entry["status"] != "ok":
            print(f"  FAILED {entry['method']} {entry['framework']} seed {entry['seed']}: {entry['error']}", file=sys.stderr)
    return EXIT_PARTIAL if index["n_failed"] else EXIT_OK


def _cmd_report(args) -> int:
    try:
        out = report(args.results_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(Path(out).read_text(), end="")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    worst = gradient_check(args.cases, args.seed)
    ok = True
    for name, err in worst.items():
        passed = err < GRAD_TOLERANCE
        ok &= passed
        print(f"{name:22s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_PARTIAL


def _cmd_ledger_check(args) -> int:
    from clhpo.hpo import ledger_sweep

    rows = ledger_sweep(seed=args.seed)
    print(f"{'framework':16s} {'K':>3s} {'T':>3s} {'select':>7s} {'retrain':>7s} {'expected':>9s}")
    for r in rows:
        exp = f"{r['expected_selection']}+{r['expected_retrain']}"
        print(f"{r['framework']:16s} {r['K']:3d} {r['T']:3d} {r['selection']:7d} {r['retrain']:7d} {exp:>9s}  {'ok' if r['ok'] else 'MISMATCH'}")
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clhpo", description="HPO frameworks for continual learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config")
    p.add_argument("--seed-override", type=int, default=None, help="replace the config's seed list with one seed")
    p.add_argument("--jobs", type=int, default=1, help="runs to execute in parallel")
    p.add_argument("--output", default=None, help="results directory (overrides the config)")
    p.add_argument("--dump-buffer", action="store_true", help="write each run's final replay buffer as CSV")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="summarise a results directory across seeds")
    p.add_argument("results_dir")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("ledger-check", help="print measured vs closed-form training units over a (K, T) sweep")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ledger_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
