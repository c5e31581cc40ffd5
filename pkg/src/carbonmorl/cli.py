"""Command line: simulate, train, sweep and report."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .baselines import METHODS
from .config import Config, ConfigError, load_config
from .env import NetworkEnv, write_trajectory


def _config(args):
    return load_config(args.config) if args.config else Config()


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list: {text}")


def cmd_simulate(args):
    cfg = _config(args)
    slots = args.slots or cfg.sim.horizon
    env = NetworkEnv(cfg, batch=1, seed=args.seed)
    env.reset()
    rng = np.random.default_rng(args.seed)
    space = env.actions
    fixed = space.initial_normalized()
    trace = []
    for _ in range(slots):
        x = rng.uniform(size=space.dim) if args.policy == "random" else fixed
        _, slot = env.step(x)
        trace.append(slot)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    write_trajectory(path, trace)
    print(f"wrote {path}")
    return 0


def cmd_train(args):
    from .plotting import plot_curves
    from .training import evaluate_policy, train, write_curves
    cfg = _config(args)
    zeta = tuple(float(z) for z in args.zeta.split(","))
    epochs = args.epochs if args.epochs is not None else cfg.training.get("epochs", 300)
    policy, curves, _ = train(cfg, zeta=zeta, epochs=epochs, method=args.method, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curves(out / "curves.csv", curves)
    policy.save(out / "policy.txt")
    if curves:
        plot_curves(curves, out / "curves.png")
    metrics = evaluate_policy(cfg, policy, 10_000 + args.seed, episodes=4)
    for k, v in metrics.items():
        print(f"{k}\t{v!r}")
    return 0


def cmd_sweep(args):
    from .harness import Experiment, run_sweep, write_report
    from .plotting import plot_results
    cfg = _config(args)
    methods = tuple(args.method.split(",")) if args.method else (
        ("proposed",) if args.mode == "fig4" else METHODS)
    epochs = args.epochs if args.epochs is not None else cfg.training.get("epochs", 300)
    exp = Experiment(args.mode, args.mode, cfg, methods=methods, seeds=args.seeds,
                     epochs=epochs, out=Path(args.out))

    def progress(value, method, seed):
        print(f"done {args.mode} {value} {method} seed={seed}", file=sys.stderr, flush=True)

    results = run_sweep(exp, progress)
    write_report(results.rows, args.out, title=args.mode)
    plot_results(results.rows, args.mode, Path(args.out) / f"{args.mode}.png")
    print(f"wrote {Path(args.out) / (args.mode + '_results.csv')}")
    return 0


def cmd_report(args):
    from .harness import read_results, write_report
    from .plotting import plot_results
    path = Path(args.results)
    if not path.is_file():
        raise ConfigError(f"results file not found: {path}")
    rows = read_results(path)
    out = Path(args.out)
    mode = args.mode
    summary = write_report(rows, out, title=mode)
    plot_results(rows, mode, out / f"{mode}.png")
    from .harness import format_report
    print(format_report(summary, mode), end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="carbonmorl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--out", default="out", help="output directory")

    s = sub.add_parser("simulate", help="roll a random or fixed policy and dump the trajectory")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slots", type=int, default=None)
    s.add_argument("--policy", choices=("random", "fixed"), default="random")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train one method for one preference vector")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", choices=METHODS, default="proposed")
    s.add_argument("--zeta", default="0.3333333333333333,0.3333333333333333,0.3333333333333334")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a figure sweep over methods and seeds")
    common(s)
    s.add_argument("--mode", choices=("fig2", "fig3", "fig4"), required=True)
    s.add_argument("--seeds", type=_seeds, default=(0, 1, 2, 3, 4))
    s.add_argument("--method", default=None, help="comma-separated methods")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="summarize a results table")
    s.add_argument("results", help="results CSV written by sweep")
    s.add_argument("--mode", choices=("fig2", "fig3", "fig4"), default="fig2")
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
