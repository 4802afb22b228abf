"""Command line entry point: ``stucco run`` and ``stucco report``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import METHODS, ExperimentConfig, method_stats, run_experiment
from .sim import PRESETS

log = logging.getLogger("stucco")


def parse_seeds(text: str) -> list[int]:
    """``"0-19"``, ``"3"`` or ``"1,4,7-9"`` to a sorted list of distinct seeds."""
    out = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            out.update(range(lo, hi + 1))
        else:
            out.add(int(part))
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return sorted(out)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.params) if args.params else ExperimentConfig()
    if args.preset:
        cfg.presets = list(args.preset)
    if args.method:
        cfg.methods = list(args.method)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.out:
        cfg.out = args.out
    if args.trajectory:
        cfg.trajectory = args.trajectory
    if args.workers is not None:
        cfg.workers = args.workers
    if args.full_belief_log:
        cfg.full_belief_log = True
    return cfg.validate()


def _print_stats(rows):
    stats = method_stats(rows)
    print(f"{'preset':10s} {'method':7s} {'runs':>4s} {'FMI':>6s} {'CE cm':>6s} {'grasp':>6s}")
    for d in stats:
        f = "-" if d["fmi_median"] is None else f"{d['fmi_median']:.3f}"
        c = "-" if d["ce_cm_median"] is None else f"{d['ce_cm_median']:.2f}"
        g = "-" if d["grasp_rate"] is None else f"{100 * d['grasp_rate']:.0f}%"
        print(f"{d['preset']:10s} {d['method']:7s} {d['runs']:4d} {f:>6s} {c:>6s} {g:>6s}")


def cmd_run(args) -> int:
    cfg = build_config(args)
    rows = run_experiment(cfg)
    _print_stats(rows)
    if not args.no_report:
        from .report import render_report
        for p in render_report(cfg.out):
            print(f"wrote {p}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    for p in render_report(args.run_dir):
        print(f"wrote {p}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stucco", description="Contact tracking experiments in a planar pushing simulator.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate presets and score every method")
    run.add_argument("--preset", action="append", choices=PRESETS,
                     help="preset to run (repeatable; default from --params or gap2)")
    run.add_argument("--method", action="append", choices=METHODS,
                     help="method to run (repeatable; default all)")
    run.add_argument("--seeds", type=parse_seeds, help="seed list such as 0-19 or 1,3,5")
    run.add_argument("--out", help="output directory (default runs)")
    run.add_argument("--params", help="YAML experiment config; flags override its fields")
    run.add_argument("--trajectory", help="YAML action sequence replayed instead of the preset's own")
    run.add_argument("--workers", type=int, help="worker processes over (preset, seed) cells")
    run.add_argument("--full-belief-log", action="store_true",
                     help="log every particle each step instead of the MAP particle only")
    run.add_argument("--no-report", action="store_true", help="skip rendering figures")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render figures from a finished run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
