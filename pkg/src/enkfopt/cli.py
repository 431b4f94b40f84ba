"""Command-line front end: ``enkfopt {run,sweep,rate,compare,plot-data}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, EnKFError, NumericError
from .harness.config import load_config, override
from .harness.rates import estimate_rate
from .harness.report import compare_report, discover_sets, plot_data
from .harness.runner import run_experiment, run_sweep
from .harness.traces import find_traces
from .parallel import default_workers

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("enkfopt")


def _load(args):
    config = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if args.variant is not None:
        updates["optimizer.variant"] = args.variant
    if args.out is not None:
        updates["output_dir"] = args.out
    return override(config, updates) if updates else config


def _status(results) -> int:
    failures = [r for res in results for r in res.failures]
    for f in failures:
        log.error("%s failed: %s", f.path, f.error)
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    if config.sweep:
        log.info("ignoring the sweep block; use 'enkfopt sweep' to expand it")
        config = override(config, {"sweep": None})
    label = config.name if args.variant is None else f"{config.name}/variant={args.variant}"
    res = run_experiment(config, config.output_dir, args.workers, label=label, log=log.info)
    print(res.directory)
    return _status([res])


def cmd_sweep(args) -> int:
    config = _load(args)
    results = run_sweep(config, config.output_dir, args.workers, log=log.info)
    for label, res in results.items():
        print(f"{label}\t{res.directory}")
    return _status(results.values())


def cmd_rate(args) -> int:
    missing = [d for d in args.traces if not Path(d).exists()]
    if missing:
        raise ConfigError(f"no such trace path: {missing[0]}")
    paths = [p for d in args.traces for p in (find_traces(d) if Path(d).is_dir() else [Path(d)])]
    if not paths:
        raise ConfigError("no trace files found")
    window = tuple(args.window) if args.window else None
    est = estimate_rate(paths, burn_in=args.burn_in, window=window)
    print(est)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.sets) == 1:
        sets = discover_sets(args.sets[0])
    else:
        sets = {Path(s).name: s for s in args.sets}
    csv_path, md_path = compare_report(sets, args.out, args.name)
    print(csv_path)
    print(md_path)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    print(plot_data(args.directory, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enkfopt", description="Derivative-free EnKF optimization experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("run", cmd_run, "run one configured experiment"),
                            ("sweep", cmd_sweep, "run every point of the config's sweep block")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=default_workers(),
                       help="particle evaluation workers (default: logical cores)")
        p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
        p.add_argument("--variant", help="optimizer variant (overrides optimizer.variant)")
        p.set_defaults(func=fn)

    p = sub.add_parser("rate", help="fit the log-log slope of the mean squared distance")
    p.add_argument("traces", nargs="+", help="trace directories or CSV files")
    p.add_argument("--burn-in", type=float, default=0.1)
    p.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("compare", help="align trace sets on forward cost")
    p.add_argument("sets", nargs="+", help="trace-set directories (one directory: compare its subsets)")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="report")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot-data", help="emit median/quartile curves as CSV")
    p.add_argument("directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EnKFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
