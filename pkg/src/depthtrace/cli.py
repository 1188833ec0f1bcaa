"""Command-line entry points for dataset generation, training and evaluation."""

from __future__ import annotations

import argparse
import sys

from .bench import (BENCH_LEARNING_RATE, DEFAULT_GRID, DEFAULT_TASKS,
                    RunConfig, ablate, evaluate, gen_dataset, log_stdout,
                    make_pipeline, metrics_rows, render_trace_overlay,
                    run_matrix, train_from_store, write_csv)
from .policy import TrainConfig, load_checkpoint, save_checkpoint
from .prompting import TraceVariant
from .simenv import TASKS


def _parse_tasks(spec: str) -> tuple[str, ...]:
    if spec == "all":
        return DEFAULT_TASKS
    tasks = tuple(t.strip() for t in spec.split(",") if t.strip())
    for t in tasks:
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r} (have: {', '.join(sorted(TASKS))})")
    return tasks


def _variant(name: str) -> TraceVariant | None:
    return None if name == "none" else TraceVariant(name)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=BENCH_LEARNING_RATE,
                   help="learning rate (from-scratch default; the low-rate "
                        "fine-tuning value is available via TrainConfig)")
    p.add_argument("--epochs", type=int, default=2)


def cmd_gen_data(args) -> int:
    paths = gen_dataset(_parse_tasks(args.tasks), args.n, args.seed, args.out,
                        max_steps=args.max_steps)
    print(f"wrote {len(paths)} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    weights, losses = train_from_store(
        args.data, args.buffer, _variant(args.variant), _train_cfg(args),
        log=log_stdout)
    save_checkpoint(weights, args.out)
    print(f"final loss {losses[-1]:.6f}; checkpoint -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    weights = load_checkpoint(args.ckpt)
    variant = _variant(args.variant) or TraceVariant.C
    run = RunConfig(buffer_size=args.buffer, variant=variant, mode=args.mode,
                    episodes=args.episodes, seed=args.seed,
                    tasks=_parse_tasks(args.task), max_steps=args.max_steps)
    metrics = evaluate(weights, run, make_pipeline(variant), log=log_stdout)
    write_csv(metrics_rows(metrics, run), args.csv)
    print(f"csv -> {args.csv}")
    return 0


def cmd_ablate(args) -> int:
    if args.grid == "default":
        grid = DEFAULT_GRID
    elif args.grid == "with-b":
        grid = tuple((v, b) for v in (TraceVariant.A, TraceVariant.B,
                                      TraceVariant.C) for b in (7, 15, 30))
    else:
        raise ValueError(f"unknown grid {args.grid!r}")
    rows = ablate(args.data, grid, episodes=args.episodes, seed=args.seed,
                  tasks=_parse_tasks(args.tasks), train_cfg=_train_cfg(args),
                  max_steps=args.max_steps, log=log_stdout)
    write_csv(rows, args.csv)
    print(f"csv -> {args.csv}")
    return 0


def cmd_matrix(args) -> int:
    base = load_checkpoint(args.base)
    rows = run_matrix(base, args.data, episodes=args.episodes, seed=args.seed,
                      tasks=_parse_tasks(args.tasks),
                      train_cfg=_train_cfg(args), max_steps=args.max_steps,
                      log=log_stdout)
    write_csv(rows, args.csv)
    print(f"csv -> {args.csv}")
    return 0


def cmd_render_traces(args) -> int:
    variant = TraceVariant(args.variant)
    paths = render_trace_overlay(args.episode, args.step, variant, args.out,
                                 buffer_size=args.buffer)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthtrace",
        description="trace-prompted depth benchmark: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate scripted demonstrations")
    p.add_argument("--tasks", default="all")
    p.add_argument("--n", type=int, default=52)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="behavior-clone a policy from a store")
    p.add_argument("--data", required=True)
    p.add_argument("--buffer", type=int, choices=(7, 15, 30), default=30)
    p.add_argument("--variant", choices=("A", "B", "C", "none"), default="C")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", default="all")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--buffer", type=int, default=30)
    p.add_argument("--variant", choices=("A", "B", "C", "none"), default="C")
    p.add_argument("--mode", choices=("base", "finetuned", "traces_0shot",
                                      "st_vla"), default="st_vla")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant x buffer grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="default", choices=("default", "with-b"))
    p.add_argument("--tasks", default="all")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--csv", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("matrix", help="fine-tune x inference-prompting grid")
    p.add_argument("--base", required=True,
                   help="checkpoint trained without traces")
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default="all")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--csv", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("render-traces", help="write trace overlay panels")
    p.add_argument("--episode", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--variant", choices=("A", "B", "C"), default="C")
    p.add_argument("--buffer", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_traces)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
