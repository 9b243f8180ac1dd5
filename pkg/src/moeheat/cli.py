"""Command-line entry point: ``moeheat {gen-data,schedule,train,eval,report,route-demo}``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, load_config
from .data import empirical_task_distribution, generate_corpus, load_corpus, save_corpus, zipf_sizes
from .routing import balanced_assign, greedy_assign
from .schedule import HeatingConfig, schedule_table

ROUTE_DEMO_MAX_TOKENS = 64
ROUTE_DEMO_MAX_EXPERTS = 16


class UsageError(Exception):
    """Bad input; reported with exit status 2."""


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    corpus = generate_corpus(cfg.data)
    try:
        save_corpus(corpus, out)
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    sizes = zipf_sizes(cfg.data.num_tasks, cfg.data.zipf_s, cfg.data.base_size)
    p = empirical_task_distribution(corpus)
    print("sizes:", " ".join(str(s) for s in sizes))
    print("p:", " ".join(f"{x:.6f}" for x in p))
    return 0


def cmd_schedule(args) -> int:
    try:
        cfg = HeatingConfig(args.ts, args.k, args.epochs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("epoch,temperature")
    for e, t in schedule_table(cfg):
        print(f"{e},{t:.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    corpus = _load_corpus(args.data)
    try:
        trainer.check_compatible(cfg, corpus)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    fresh = not out.exists()
    try:
        trainer.run(cfg, corpus, out, resume=args.resume, checkpoint_every=args.checkpoint_every,
                    record_time=args.record_time)
    except BaseException:
        if fresh:
            shutil.rmtree(out, ignore_errors=True)
        raise
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    try:
        doc = trainer.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    corpus = _load_corpus(args.data)
    model = doc["model"]
    if model.vocab != corpus.vocab or model.num_tasks != corpus.num_tasks:
        raise UsageError("checkpoint is incompatible with the corpus (vocab or task count differs)")
    v = trainer.validate(model, corpus)
    print(f"{'task':>7} {'tokens':>7} {'ppl':>10} {'accuracy':>9}")
    for tv in v.per_task:
        print(f"{tv.task:>7} {tv.tokens:>7} {tv.ppl:>10.4f} {tv.accuracy:>9.4f}")
    total = sum(tv.tokens for tv in v.per_task)
    print(f"{'overall':>7} {total:>7} {v.ppl:>10.4f} {v.accuracy:>9.4f}")
    return 0


def _run_summary(run_dir: Path, target_ppl):
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise UsageError(f"{run_dir}: no metrics.csv")
    metrics = trainer.read_metrics(metrics_path)
    if not metrics:
        raise UsageError(f"{run_dir}: metrics.csv is empty")
    tasks = trainer.read_task_metrics(run_dir / "task_metrics.csv")
    last = metrics[-1].epoch
    final = {r["task"]: r["valid_ppl"] for r in tasks if r["epoch"] == last}
    n = len(final)
    low = list(range(n // 2, n)) if n > 1 else [0]
    usage_path = run_dir / "usage.json"
    usage = trainer.ExpertUsage.from_json(json.loads(usage_path.read_text())) if usage_path.exists() else None
    per_task = []
    for t in range(n):
        row = {"task": t, "h_first": None, "h_last": None, "drift": None}
        if usage is not None and usage.counts:
            hf, hl, dr = [], [], []
            for layer in usage.layers():
                es = usage.epochs(t, layer)
                if not es:
                    continue
                hf.append(trainer.usage_entropy(usage.get(es[0], layer, t)))
                hl.append(trainer.usage_entropy(usage.get(es[-1], layer, t)))
                dr.append(trainer.usage_drift(usage, t, layer, es[0], es[-1]))
            if hf:
                row.update(h_first=float(np.mean(hf)), h_last=float(np.mean(hl)), drift=float(np.mean(dr)))
        per_task.append(row)
    return {
        "run": str(run_dir),
        "steps": trainer.steps_to_target(metrics, target_ppl) if target_ppl is not None else None,
        "final_ppl": metrics[-1].valid_ppl,
        "final_low_ppl": float(np.mean([final[t] for t in low])) if final else float("nan"),
        "per_task": per_task,
    }


def _fmt(x, spec=".3f"):
    return "n/a" if x is None else format(x, spec)


def cmd_report(args) -> int:
    runs = [_run_summary(Path(r), args.target_ppl) for r in args.run]
    print(f"target ppl: {_fmt(args.target_ppl, '.4f')}")
    print(f"{'run':<4} {'steps_to_target':>15} {'final_ppl':>10} {'final_low_ppl':>13}  path")
    for i, s in enumerate(runs):
        print(f"{i:<4} {_fmt(s['steps'], 'd'):>15} {s['final_ppl']:>10.4f} {s['final_low_ppl']:>13.4f}  {s['run']}")
    for i, s in enumerate(runs):
        print(f"\nrun {i} expert usage (entropy in nats, mean over expert layers)")
        print(f"{'task':>5} {'H_first':>8} {'H_last':>8} {'drift':>7}")
        for row in s["per_task"]:
            print(f"{row['task']:>5} {_fmt(row['h_first']):>8} {_fmt(row['h_last']):>8} {_fmt(row['drift']):>7}")
    if len(runs) >= 2:
        print("\nstep ratios: steps(row) / steps(col)")
        print("     " + "".join(f"{j:>8}" for j in range(len(runs))))
        for i, a in enumerate(runs):
            cells = []
            for b in runs:
                ok = a["steps"] is not None and b["steps"]
                cells.append(f"{a['steps'] / b['steps']:.2f}" if ok else "n/a")
            print(f"{i:<5}" + "".join(f"{c:>8}" for c in cells))
    return 0


def cmd_route_demo(args) -> int:
    if not 1 <= args.tokens <= ROUTE_DEMO_MAX_TOKENS:
        raise UsageError(f"--tokens must be in [1, {ROUTE_DEMO_MAX_TOKENS}]")
    if not 1 <= args.experts <= ROUTE_DEMO_MAX_EXPERTS:
        raise UsageError(f"--experts must be in [1, {ROUTE_DEMO_MAX_EXPERTS}]")
    rng = np.random.default_rng(args.seed)
    scores = rng.uniform(-1.0, 1.0, size=(args.tokens, args.experts))
    bal = balanced_assign(scores)
    gre = greedy_assign(scores)
    print("affinity (token x expert):")
    print("      " + "".join(f"{j:>8}" for j in range(args.experts)))
    for t, row in enumerate(scores):
        print(f"{t:>5} " + "".join(f"{x:>8.3f}" for x in row))
    print(f"\n{'token':>5} {'balanced':>9} {'greedy':>7}")
    for t in range(args.tokens):
        print(f"{t:>5} {bal.expert_of[t]:>9} {gre.expert_of[t]:>7}")
    print("\nbalanced loads:", " ".join(map(str, bal.loads)), f"  total {bal.total(scores):.6f}")
    print("greedy loads:  ", " ".join(map(str, gre.loads)), f"  total {gre.total(scores):.6f}")
    if args.json:
        doc = {
            "seed": args.seed, "scores": scores.tolist(),
            "balanced": {"expert_of": bal.expert_of.tolist(), "loads": bal.loads.tolist(), "total": bal.total(scores)},
            "greedy": {"expert_of": gre.expert_of.tolist(), "loads": gre.loads.tolist(), "total": gre.total(scores)},
        }
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def _load_config(path):
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except ConfigError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _load_corpus(path):
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise UsageError(f"corpus file not found: {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid corpus {path}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeheat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-task corpus (JSONL)")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("schedule", help="print the heating schedule as CSV")
    p.add_argument("--ts", type=float, required=True, help="starting temperature t_s (> 0)")
    p.add_argument("--k", type=float, required=True, help="conduction coefficient k (>= 0)")
    p.add_argument("--epochs", type=int, required=True, help="maximum number of epochs C (>= 1)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="corpus JSONL from gen-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also keep checkpoints/epoch_XXXX.json every N epochs")
    p.add_argument("--record-time", action="store_true",
                   help="fill metrics.csv elapsed_ms with wall-clock time (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-task validation ppl and accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("--run", nargs="+", required=True, help="one or more run directories")
    p.add_argument("--target-ppl", type=float, help="validation ppl threshold for steps_to_target")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("route-demo", help="balanced vs greedy routing on a random affinity matrix")
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the dump to this JSON file")
    p.set_defaults(func=cmd_route_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"moeheat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except trainer.DivergenceError as exc:
        print(f"moeheat {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
