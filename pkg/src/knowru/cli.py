"""Command line entry point: ``knowru <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import gradcheck
from .env import ConfigurationError
from .metrics import transfer_report, write_report

log = logging.getLogger("knowru")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knowru", description="Multi-agent knowledge reuse experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress every 100 episodes")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="skip seeds the manifest marks complete")

    e = sub.add_parser("evaluate", help="noise-free rollouts of saved actors")
    e.add_argument("snapshot_dir", help="directory holding agent_<i>/actor.snap")
    e.add_argument("config")
    e.add_argument("--episodes", type=int, default=100)

    m = sub.add_parser("metrics", help="transfer report of treated runs against a baseline")
    m.add_argument("baseline_dir")
    m.add_argument("treated_dir")
    m.add_argument("--out", help="report CSV path (default <treated_dir>/report.csv)")
    m.add_argument("--window", type=int, help="jump-start window in episodes")
    m.add_argument("--stability-window", type=int)
    m.add_argument("--threshold", type=float, help="default: baseline final-10%% mean")

    sub.add_parser("grad-check", help="finite-difference gradient suite")

    a = sub.add_parser("alpha-sweep", help="time-to-threshold study over initial alphas")
    a.add_argument("config")
    a.add_argument("--alphas", type=float, nargs="+", default=[0.1, 0.3, 0.5, 0.7, 0.9])
    a.add_argument("--threshold", type=float)
    a.add_argument("--resume", action="store_true")
    return p


def _progress(seed, stats):
    if (stats.episode + 1) % 100 == 0:
        log.info("seed %d episode %d mean reward %.4f", seed, stats.episode + 1, stats.mean_reward)


def _train(args) -> int:
    cfg = ex.load_config(args.config)
    records = ex.run(cfg, resume=args.resume, progress=_progress)
    failed = [r for r in records if r.status != "complete"]
    for r in records:
        tail = r.curve[-max(1, len(r.curve) // 10):].mean() if len(r.curve) else float("nan")
        print(f"seed {r.seed}: {r.status}  final-10% mean reward {tail:.4f}  {r.directory}")
    return 1 if failed else 0


def _evaluate(args) -> int:
    if args.episodes < 1:
        raise ConfigurationError("--episodes must be >= 1")
    cfg = ex.load_config(args.config)
    print(f"{ex.evaluate(args.snapshot_dir, cfg, args.episodes):.6f}")
    return 0


def _paired_curves(baseline_dir, treated_dir):
    base, treat = ex.seed_curves(baseline_dir), ex.seed_curves(treated_dir)
    seeds = sorted(set(base) & set(treat))
    if not seeds:
        raise FileNotFoundError(f"no shared seed_*/episodes.csv under {baseline_dir} and {treated_dir}")
    return seeds, [base[s] for s in seeds], [treat[s] for s in seeds]


def _metrics(args) -> int:
    seeds, base, treat = _paired_curves(args.baseline_dir, args.treated_dir)
    rep = transfer_report(base, treat, window=args.window, threshold=args.threshold,
                          stability_window=args.stability_window)
    out = Path(args.out) if args.out else Path(args.treated_dir) / "report.csv"
    write_report(rep, out, str(args.baseline_dir), str(args.treated_dir))
    print(f"seeds {seeds}")
    for s in rep.summaries():
        print(f"{s.metric:28s} {s.mean: .6f} +/- {s.ci95:.6f}")
    print(f"{'time_to_threshold_reduction':28s} {rep.time_to_threshold_reduction: .6f}")
    print(f"report written to {out}")
    return 0


def _alpha_sweep(args) -> int:
    cfg = ex.load_config(args.config)
    rows, thr, path = ex.alpha_sweep(cfg, args.alphas, args.threshold, args.resume, _progress)
    print(f"threshold {thr:.6f}")
    print("alpha0  time  reached  performance")
    for r in rows:
        print(f"{r.alpha0:<6g}  {r.time:<4d}  {int(r.reached):<7d}  {r.performance:.6f}")
    print(f"table written to {path}")
    return 0


COMMANDS = {
    "train": _train,
    "evaluate": _evaluate,
    "metrics": _metrics,
    "grad-check": lambda args: 0 if gradcheck.main() else 1,
    "alpha-sweep": _alpha_sweep,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ex.ConfigError, ConfigurationError, OSError, ValueError) as exc:
        print(f"knowru {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
