"""Command line entry point: ``dynsdpb {train,sweep,gradcheck,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import MODES, RunConfig
from .errors import ConfigError, DynSDPBError


def _common():
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="dynsdpb", parents=[common],
                                     description="Self-distillation from the previous mini-batch.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", parents=[common], help="run one experiment")
    tr.add_argument("--config", required=True)
    tr.add_argument("--mode", choices=MODES)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--tau", type=float)
    tr.add_argument("--epochs", type=int)

    sw = sub.add_parser("sweep", parents=[common], help="alpha x tau grid")
    sw.add_argument("--config", required=True)
    sw.add_argument("--alphas", required=True, help="comma-separated, e.g. 0.2,0.4")
    sw.add_argument("--taus", required=True, help="comma-separated, e.g. 1,3,5")
    sw.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    sw.add_argument("--mode", choices=MODES)
    sw.add_argument("--parallel", type=int, default=None,
                    help="worker processes (default: $DYNSDPB_THREADS or 1)")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--points", type=int, default=10)
    gc.add_argument("--threshold", type=float, default=1e-5)

    rp = sub.add_parser("report", parents=[common], help="compare completed runs")
    rp.add_argument("--runs", nargs="+", required=True)
    return parser


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def cmd_train(args):
    from .trainer import run_experiment

    cfg = RunConfig.from_file(args.config, mode=args.mode, seed=args.seed, out_dir=args.out,
                              alpha=args.alpha, tau=args.tau, epochs=args.epochs)
    start = time.perf_counter()
    art = run_experiment(cfg)
    s = art.summary
    _say(args, f"{s['mode']} on {s['task']}: best accuracy {s['best_accuracy']:.4f} "
               f"(epoch {s['best_epoch']}), {s['iterations']} iterations, "
               f"{time.perf_counter() - start:.1f}s -> {art.out_dir}")
    return 0


def cmd_sweep(args):
    from .sweep import parse_grid, run_sweep

    cfg = RunConfig.from_file(args.config, mode=args.mode, seed=args.seed, out_dir=args.out)
    seeds = [int(s) for s in parse_grid(args.seeds)] if args.seeds else None
    rows = run_sweep(cfg, parse_grid(args.alphas), parse_grid(args.taus), seeds,
                     parallel=args.parallel)
    _say(args, "alpha,tau,seed,best_accuracy")
    for r in rows:
        _say(args, f"{r['alpha']:g},{r['tau']:g},{r['seed']},{r['best_accuracy']:.4f}")
    _say(args, f"-> {Path(cfg.out_dir) / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    start = time.perf_counter()
    results = run_gradcheck(points=args.points, seed=args.seed or 0, threshold=args.threshold)
    failed = [name for name, _, ok in results if not ok]
    for name, err, ok in results:
        if not args.quiet or not ok:
            print(f"{name:26s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    _say(args, f"{len(results)} ops, {len(failed)} failed, {time.perf_counter() - start:.2f}s")
    return 1 if failed else 0


def cmd_report(args):
    from .report import write_report

    groups, written = write_report(args.runs, args.out or "report")
    _say(args, "mode,n,mean_accuracy,std_accuracy")
    for mode, g in groups.items():
        _say(args, f"{mode},{g['n']},{g['mean']:.4f},{g['std']:.4f}")
    for path in written:
        _say(args, f"-> {path}")
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("out", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DynSDPBError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
