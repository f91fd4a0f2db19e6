"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, FedlabError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedlab", description="Federated learning simulator (FedeCouple and baselines).")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("--config", help="TOML config file (defaults used when omitted)")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--out", help="output directory override")
    run.add_argument("--algorithm", help="algorithm override")
    run.add_argument("--rounds", type=int, help="round count override")
    run.add_argument("--toggle", action="append", default=[], metavar="NAME=on|off",
                     help="component toggle: gfa, glf, gpc or da (repeatable)")
    run.add_argument("--workers", type=int, help="parallel client workers (default: $FEDLAB_THREADS)")

    summ = sub.add_parser("summarize", help="mean/std/min/max of final metrics across run directories")
    summ.add_argument("--in", dest="inputs", nargs="+", required=True, metavar="DIR")
    summ.add_argument("--out", help="write the table as CSV here")

    gc = sub.add_parser("gradcheck", help="check analytic gradients against finite differences")
    gc.add_argument("--cases", type=int, default=50)
    gc.add_argument("--seed", type=int, default=0)

    st = sub.add_parser("selftest", help="run the module invariant checks")
    st.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    from .orchestrator import run_experiment, write_artifact

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, seed=args.seed, out_dir=args.out, algorithm=args.algorithm,
                          rounds=args.rounds, toggles=args.toggle)
    repeats = cfg.repeats
    for k in range(repeats):
        run_cfg = cfg if repeats == 1 else cfg.with_seed(cfg.seed + k)
        out = Path(cfg.out_dir) if repeats == 1 else Path(cfg.out_dir) / f"seed{run_cfg.seed}"
        artifact = run_experiment(run_cfg, workers=args.workers)
        write_artifact(artifact, out)
        last = artifact.reports[-1]
        print(f"{out}: rounds={len(artifact.reports)} mean_acc={last.mean_acc:.4f} "
              f"std_acc={last.std_acc:.4f} descent={artifact.verdict}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    from .orchestrator import load_artifact, summarize

    table = summarize([load_artifact(d) for d in args.inputs])
    cols = ("metric", "mean", "std", "min", "max", "n")
    rows = [[name, *(stats[c] for c in cols[1:])] for name, stats in table.items()]
    print("  ".join(f"{c:>12s}" for c in cols))
    for row in rows:
        print(f"{row[0]:>12s}  " + "  ".join(f"{v:12.6g}" for v in row[1:]))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows(rows)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "summarize":
            return _cmd_summarize(args)
        if args.command == "gradcheck":
            from .gradcheck import main as gradcheck_main
            return gradcheck_main(args.cases, args.seed)
        if args.command == "selftest":
            from .selftest import main as selftest_main
            return selftest_main(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedlabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
