"""Command-line entry point.

Subcommands: run (one method over the task sequence), sweep-orders (every
permutation of the configured task set), sweep-replay (replay buffer
sizes), gen-bench (write a task directory), report (re-emit the summary
from a results CSV). Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import report
from .bench import CONCEPTS, WARMUP_CONCEPT, generate_task, save_task
from .config import METHODS, load_config
from .errors import ConfigError, DataFormatError, DivergenceError, IntegrityError, VersionMismatch
from .train import order_sweep, replay_sweep, run_sequence

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="YAML config file")
    sub.add_argument("--method", choices=METHODS, default=None)
    sub.add_argument("--tasks", default=None, help="comma-separated concept list")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", type=Path, default=None, help="output directory")


def _build_config(args: argparse.Namespace):
    overrides = {}
    if args.method is not None:
        overrides["method"] = args.method
    if args.tasks is not None:
        overrides["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, overrides=overrides)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_sequence(cfg, out_dir=out / f"{cfg.method}_seed{cfg.seed}")
    report.append_runs_csv(out / "runs.csv", [result])
    report.write_summary(out / "summary.txt", [result])
    print(f"{cfg.method} seed {cfg.seed}: final {result.final_acc:.2f}% "
          f"a_n {result.a_n:.2f} f_n {result.f_n:.2f} ({result.wall_time_s:.1f}s)")
    return EXIT_OK


def cmd_sweep_orders(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = order_sweep(cfg)
    report.append_runs_csv(out / "runs.csv", results)
    report.write_order_sweep(out / "order_sweep.csv", results)
    report.write_summary(out / "summary.txt", results)
    finals = [r.final_acc for r in results]
    half = (max(finals) - min(finals)) / 2.0
    print(f"{cfg.method}: {len(results)} orders, final {sum(finals) / len(finals):.2f} +- {half:.2f}")
    return EXIT_OK


def cmd_sweep_replay(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes:
        raise ConfigError("--sizes must name at least one buffer size")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = replay_sweep(cfg, sizes)
    report.append_runs_csv(out / "runs.csv", results)
    report.write_replay_sweep(out / "replay_sweep.csv", sizes, results)
    report.write_summary(out / "summary.txt", results)
    for size, r in zip(sizes, results):
        print(f"replay buffer {size}: a_n {r.a_n:.2f} final {r.final_acc:.2f}")
    return EXIT_OK


def cmd_gen_bench(args: argparse.Namespace) -> int:
    known = CONCEPTS + (WARMUP_CONCEPT,)
    if args.concept not in known:
        raise ConfigError(f"unknown concept {args.concept!r}; expected one of {known}")
    task = generate_task(args.concept, args.n, args.seed)
    out = args.out / args.concept
    save_task(task, out)
    print(f"wrote {len(task.train)}/{len(task.val)}/{len(task.test)} triplets to {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    rows = report.read_runs_csv(args.runs)
    by_method: dict[str, list[dict]] = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    lines = [f"{'method':<14} {'runs':>4} {'final_acc':>10} {'a_n':>8} {'f_n':>8}"]
    for method, group in sorted(by_method.items()):
        n = len(group)
        fin = sum(g["final_acc"] for g in group) / n
        a_n = sum(g["a_n"] for g in group) / n
        f_n = sum(g["f_n"] for g in group) / n
        lines.append(f"{method:<14} {n:>4} {fin:>10.2f} {a_n:>8.2f} {f_n:>8.2f}")
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        args.out.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlcl",
                                     description="Continual vision-language concept learning harness")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="train one method over the task sequence")
    _add_common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_orders = subs.add_parser("sweep-orders", help="run every permutation of the task set")
    _add_common(p_orders)
    p_orders.set_defaults(fn=cmd_sweep_orders)

    p_replay = subs.add_parser("sweep-replay", help="run replay at several buffer sizes")
    _add_common(p_replay)
    p_replay.add_argument("--sizes", default="0,50,200", help="comma-separated buffer sizes")
    p_replay.set_defaults(fn=cmd_sweep_replay)

    p_gen = subs.add_parser("gen-bench", help="write one task directory to disk")
    p_gen.add_argument("--concept", required=True)
    p_gen.add_argument("--n", type=int, default=2000, help="triplets before the 80/10/10 split")
    p_gen.add_argument("--seed", type=int, default=100)
    p_gen.add_argument("--out", type=Path, default=Path("bench"))
    p_gen.set_defaults(fn=cmd_gen_bench)

    p_rep = subs.add_parser("report", help="summarize a results CSV")
    p_rep.add_argument("--runs", type=Path, required=True, help="path to runs.csv")
    p_rep.add_argument("--out", type=Path, default=None, help="optional summary output file")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, IntegrityError, VersionMismatch, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
