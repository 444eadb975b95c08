"""Command line entry point: ``classic <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import attention_scores
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, batch_iter, dump_suite, generate_synthetic_suite, load_suite
from .gradcheck import TOLERANCE, run_suite
from .harness import ABLATIONS, OBJECTIVES, ablate, evaluate, run_sequence
from .masks import mask_report
from .model import multi_view_forward

log = logging.getLogger("classic")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.dir is not None:
        return load_suite(d.dir, list(d.names) or None)
    return generate_synthetic_suite(d.seed, d.tasks, d.per_task, d.flip)


def _parse_ablate(text: str | None) -> tuple[str, ...] | None:
    if text is None:
        return None
    flags = tuple(f.strip().lower().lstrip("-") for f in text.split(",") if f.strip())
    bad = sorted(set(flags) - set(OBJECTIVES))
    if bad:
        raise UsageError(f"unknown ablation flags {bad}; choose from {list(OBJECTIVES)}")
    return flags


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    try:
        suite = generate_synthetic_suite(args.seed, args.tasks, args.per_task, args.flip)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    params = {"seed": args.seed, "tasks": args.tasks, "per_task": args.per_task, "flip": args.flip}
    dump_suite(suite, args.out, params)
    print(f"wrote {len(suite)} tasks to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    run = cfg.run
    overrides = {}
    if args.baseline:
        overrides["baseline"] = args.baseline
    if args.mode:
        overrides["mode"] = args.mode
    flags = _parse_ablate(args.ablate)
    if flags is not None:
        overrides["ablate"] = flags
    run = replace(run, **overrides)
    suite = _load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    first_seed = min(run.sequence_seeds)

    def on_state(seed, state) -> None:
        if seed == first_seed:
            save_checkpoint(out / "checkpoint.json", state, seed)

    with (out / "train_log.jsonl").open("w") as fh:
        metrics = run_sequence(run, suite,
                               lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"),
                               on_state)
    if args.ablation_table:
        reuse = {run.ablate: metrics} if run.baseline == "classic" else None
        table = ablate(run, suite, ABLATIONS, reuse)
        metrics["ablation"] = table
        _write_json(out / "ablation.json", table)
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "run_info.json", {"started": started, "seconds": time.time() - started,
                                        "python": platform.python_version(),
                                        "numpy": np.__version__})
    agg = metrics["aggregates"]
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(agg.items())))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    suite = load_suite(args.data)
    tests = {t.name: t.test for t in suite if t.name in state.task_names}
    missing = sorted(set(state.task_names) - set(tests))
    if missing:
        raise UsageError(f"data directory lacks trained tasks {missing}")
    table = evaluate(state, tests, args.mode)
    doc = {"mode": args.mode, "tasks": table,
           "mean": {m: float(np.mean([r[m] for r in table.values()])) for m in ("acc", "mf1")}}
    _write_json(Path(args.out), doc)
    print(f"{args.mode}: acc={doc['mean']['acc']:.4f} mf1={doc['mean']['mf1']:.4f}")
    return EXIT_OK


def cmd_mask_report(args) -> int:
    state = load_checkpoint(args.checkpoint)
    report = mask_report(state.store, [m.name for m in state.model.mask_layers])
    report["task_names"] = state.task_names
    _write_json(Path(args.out), report)
    print(f"{len(report['tasks'])} tasks, {len(report['layers'])} layers")
    return EXIT_OK


def cmd_attention(args) -> int:
    """Dump task-attention weights for a probe batch of one task's test split."""
    state = load_checkpoint(args.checkpoint)
    if state.config.baseline != "classic" or not state.store.tasks:
        raise UsageError("checkpoint has no task masks")
    by_name = {t.name: t for t in load_suite(args.data)}
    name = args.task or state.task_names[-1]
    if name not in by_name:
        raise UsageError(f"unknown task {name!r}")
    mcfg = state.model.config
    batch = batch_iter(by_name[name].test[:args.n], max(2, args.n), None, training=False,
                       vocab_buckets=mcfg.vocab_buckets, max_len=mcfg.max_len)[0]
    stored = state.store.all_test_masks()
    last = max(stored)
    with ad.no_grad():
        views = multi_view_forward(state.model, batch, {t: m for t, m in stored.items() if t != last},
                                   stored[last], last, training=False, rng=None)
        alpha = attention_scores([v.h for v in views], state.attention).data
    doc = {"task": name, "views": state.task_names, "alpha": alpha.tolist(),
           "mean_alpha": alpha.mean(axis=0).tolist()}
    _write_json(Path(args.out), doc)
    print(f"alpha shape {list(alpha.shape)}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(args.trials, args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:20s} max_rel_err={r.max_error:.3e} trials={r.trials} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} case(s) above tolerance {TOLERANCE}: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} cases within {TOLERANCE}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="classic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic task suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tasks", type=int, default=6)
    g.add_argument("--per-task", type=int, default=120)
    g.add_argument("--flip", type=float, default=0.3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train and evaluate a task sequence")
    r.add_argument("--config", required=True)
    r.add_argument("--ablate", help="comma separated objectives to drop: ced,cks,csc")
    r.add_argument("--ablation-table", action="store_true", help="also run every ablation combination")
    r.add_argument("--baseline", choices=("classic", "ncl", "one"))
    r.add_argument("--mode", choices=("dil", "til"))
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint in DIL or TIL mode")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("dil", "til"), default="til")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("mask-report", help="mask capacity and overlap statistics")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask_report)

    a = sub.add_parser("attention", help="dump task-attention weights for a probe batch")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--task")
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention)

    c = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "trials", 1) < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
