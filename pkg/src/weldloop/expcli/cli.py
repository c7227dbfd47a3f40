from __future__ import annotations

import argparse
import logging
import sys

from weldloop import weldsim
from weldloop.expcli import config as cfg
from weldloop.expcli import runner


def _load(args) -> cfg.ExperimentConfig:
    conf = cfg.load_config(args.config) if args.config else cfg.ExperimentConfig()
    overrides = {}
    for key in ("surface", "episodes", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "realtime", False):
        overrides["realtime"] = "true"
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key] = value
    conf = cfg.apply_overrides(conf, overrides)
    cfg.resolve_profile(conf.surface)
    return conf


def cmd_run(args) -> int:
    conf = _load(args)
    result = runner.run_experiment(conf, args.out, cross_process=args.cross_process, plots=not args.no_plots)
    power, best = result.baseline_best
    print(f"baseline: {power:g} W, mean return {best:.4f}")
    if result.test_returns:
        print(f"last-10 test mean vs baseline: {result.improvement:+.2f}%")
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_baseline(args) -> int:
    conf = _load(args)
    if args.noise_off:
        conf = cfg.apply_overrides(conf, {"sim.noise": "false"})
    table, (power, best) = runner.run_baseline(conf)
    for p, mean in table:
        print(f"{p:6.1f} W  {mean:.4f}")
    print(f"best: {power:g} W, mean return {best:.4f}")
    if args.out:
        from pathlib import Path
        Path(args.out).mkdir(parents=True, exist_ok=True)
        runner.write_csv(Path(args.out) / "baseline.csv", runner.BASELINE_COLUMNS, table)
    return 0


def cmd_plot(args) -> int:
    from weldloop.expcli import plots
    for path in plots.plot_dir(args.dir):
        print(path)
    return 0


def _common(p: argparse.ArgumentParser):
    p.add_argument("--surface", help=f"preset ({', '.join(weldsim.PRESETS)}) or profile file")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weldloop")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train on one surface and write CSV/SVG artifacts")
    _common(run)
    run.add_argument("--episodes", type=int)
    run.add_argument("--out", required=True)
    run.add_argument("--realtime", action="store_true", help="pace device steps at 10 ms")
    run.add_argument("--cross-process", action="store_true", help="run the device in a separate process over TCP")
    run.add_argument("--no-plots", action="store_true")
    run.set_defaults(func=cmd_run)

    base = sub.add_parser("baseline", help="grid search the optimal constant power")
    _common(base)
    base.add_argument("--noise-off", action="store_true")
    base.add_argument("--out")
    base.set_defaults(func=cmd_baseline)

    plot = sub.add_parser("plot", help="render SVG plots from a run directory")
    plot.add_argument("dir")
    plot.set_defaults(func=cmd_plot)

    dev = sub.add_parser("device", help="device side of a cross-process session", add_help=False)
    dev.set_defaults(func=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "device":
        from weldloop import device
        logging.basicConfig(level=logging.WARNING)
        return device.main(argv[1:])
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
