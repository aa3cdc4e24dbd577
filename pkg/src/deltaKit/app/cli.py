"""
`deltakit` command line: verify, gradcheck, bench, train, eval, compare, rules.

Exit codes: 0 success, 1 a check failed (or training diverged), 2 usage or
configuration error. Reports go to stdout (or --out); logs go to stderr and
the rotating log file.
"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from deltaKit import setup_logger
from deltaKit.app.bench import (
    BENCH_COLUMNS,
    bench_grid,
    overhead_ratio,
    prefill_grid,
    prefill_ratios,
    run_case,
)
from deltaKit.app.utils import (
    format_table,
    load_environment,
    ordered_map,
    resolve_log_dir,
    resolve_log_level,
    resolve_threads,
    write_csv,
    write_json,
    write_text,
)
from deltaKit.core.chunkwise import run_chunkwise
from deltaKit.core.exceptions import (
    CheckpointError,
    ConfigError,
    DeltaKitError,
    DomainError,
    ShapeMismatchError,
    TrainingDivergedError,
    UnknownRuleError,
    UnsupportedRuleError,
)
from deltaKit.core.grad import LossSpec, finite_diff_check
from deltaKit.core.numerics import Rng
from deltaKit.core.rules import CHUNKWISE_RULES, RULE_NAMES, get_rule, rule_catalog
from deltaKit.core.scan import SequenceOutputs, random_inputs, run_sequential
from deltaKit.model.config import ModelConfig, parse_config
from deltaKit.model.network import gradcheck_model, init_parameters
from deltaKit.training.checkpoint import read_header
from deltaKit.training.loop import RunConfig, evaluate, load_run_config, load_trained, train_loop
from deltaKit.training.tasks import IGNORE

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, UnknownRuleError, UnsupportedRuleError, CheckpointError, ShapeMismatchError,
                DomainError, FileNotFoundError)

VERIFY_COLUMNS = ("rule", "L", "C", "seed", "max_abs_diff_O", "max_abs_diff_S", "tol", "status")
COMPARE_COLUMNS = ("rule", "seed", "steps", "final_loss", "final_recall")
CATALOG_COLUMNS = ("name", "model", "transition", "delta", "chunkwise", "update")

# Complete oracle grid for `verify --full`; C = L is added per length.
FULL_LENGTHS = (1, 5, 64, 257, 1024)
FULL_CHUNKS = (1, 2, 3, 16, 64)
FULL_SEEDS = 20


def _rule_names(values: Optional[Sequence[str]], default: Sequence[str]) -> List[str]:
    names = list(values) if values else list(default)
    for name in names:
        get_rule(name)
    return names


# ===== verify =====
def _verify_cell(cell: Dict) -> Dict:
    rule, L, C, seed = cell["rule"], cell["L"], cell["C"], cell["seed"]
    lanes = (cell["heads"],) if cell["heads"] > 1 else ()
    inputs = random_inputs(rule, L, cell["d_k"], cell["d_v"], lanes=lanes, seed=seed)
    reference = run_sequential(inputs)
    if cell["sequential_only"]:
        candidate = _windowed_sequential(inputs, C)
    else:
        candidate, _ = run_chunkwise(inputs, C)
    diff_O = float(np.max(np.abs(candidate.O - reference.O)))
    diff_S = float(np.max(np.abs(candidate.S_final - reference.S_final)))
    status = "PASS" if max(diff_O, diff_S) <= cell["tol"] else "FAIL"
    return {"rule": rule, "L": L, "C": C, "seed": seed, "max_abs_diff_O": diff_O,
            "max_abs_diff_S": diff_S, "tol": cell["tol"], "status": status}


def _windowed_sequential(inputs, C: int) -> SequenceOutputs:
    """Sequential scan restarted every C steps from the carried state (prefix consistency)."""
    S, pieces = inputs.initial_state(), []
    for start in range(0, inputs.length, C):
        out = run_sequential(inputs.window(start, min(start + C, inputs.length), S))
        pieces.append(out.O)
        S = out.S_final
    return SequenceOutputs(O=np.concatenate(pieces, axis=-2), S_final=S)


def verify_cells(args) -> List[Dict]:
    """
    Expand verify arguments into grid cells.

    `--full` selects every chunkwise rule over the complete oracle grid:
    FULL_LENGTHS × (FULL_CHUNKS plus C = L) × FULL_SEEDS seeds.
    """
    if args.full:
        rules, lengths, chunks, seeds = list(CHUNKWISE_RULES), FULL_LENGTHS, FULL_CHUNKS, FULL_SEEDS
    else:
        rules = list(CHUNKWISE_RULES) if args.all else _rule_names(args.rule, CHUNKWISE_RULES)
        lengths, chunks, seeds = args.L, args.C, args.seeds
    if not args.sequential_only:
        unsupported = [r for r in rules if not get_rule(r).chunkwise]
        if unsupported:
            raise UnsupportedRuleError(
                f"chunkwise unsupported for rule(s) {', '.join(unsupported)}; use --sequential-only",
                [{"field": "rule", "error": "chunkwise unsupported"}])
    if any(L < 1 for L in lengths) or any(C < 1 for C in chunks):
        raise ConfigError("--L and --C values must be >= 1")
    cells = []
    for rule in rules:
        for L in lengths:
            sizes = {min(C, L) for C in chunks} | ({L} if args.full else set())
            for C in sorted(sizes):
                for s in range(seeds):
                    cells.append({"rule": rule, "L": L, "C": C, "seed": args.seed + s, "d_k": args.d_k,
                                  "d_v": args.d_v or args.d_k, "heads": args.heads, "tol": args.tol,
                                  "sequential_only": args.sequential_only})
    return cells


def cmd_verify(args) -> int:
    cells = verify_cells(args)
    rules = list(dict.fromkeys(cell["rule"] for cell in cells))
    threads = resolve_threads(args.threads)
    logger.info(f"verify: {len(cells)} cells over rules={rules} threads={threads}")
    rows = ordered_map(_verify_cell, cells, threads)
    failures = [r for r in rows if r["status"] != "PASS"]
    write_csv(rows, VERIFY_COLUMNS, args.out)
    if args.out:
        write_text(format_table(rows, VERIFY_COLUMNS))
    worst = max(max(r["max_abs_diff_O"], r["max_abs_diff_S"]) for r in rows)
    logger.info(f"verify: {len(rows) - len(failures)}/{len(rows)} PASS, worst diff {worst:.3e} (tol {args.tol:g})")
    return EXIT_FAILURE if failures else EXIT_OK


# ===== gradcheck =====
def _gradcheck_cell(cell: Dict) -> Dict:
    inputs = random_inputs(cell["rule"], cell["L"], cell["d"], cell["d"], seed=cell["seed"])
    loss = LossSpec.random(cell["loss"], inputs, Rng(cell["seed"]).spawn(7))
    report = finite_diff_check(inputs, loss, h=cell["h"], tol=cell["tol"])
    report.label = f"{cell['rule']}/seed={cell['seed']}"
    return report.to_dict()


def _model_gradcheck(rule: str, seed: int, h: float, tol: float) -> Dict:
    config = ModelConfig(vocab_size=16, d_model=32, n_layers=2, n_heads=2, head_dim=16, hybrid_ratio=1,
                         rule=rule, mlp_mult=2, seed=seed)
    rng = Rng(seed).spawn(11)
    tokens = rng.integers(0, config.vocab_size, (2, 8))
    targets = rng.integers(0, config.vocab_size, (2, 8))
    report = gradcheck_model(init_parameters(config), config, tokens, targets, targets != IGNORE,
                             h=h, tol=tol, seed=seed)
    report.label = f"model:{rule}/seed={seed}"
    return report.to_dict()


def cmd_gradcheck(args) -> int:
    rules = _rule_names(args.rule, RULE_NAMES)
    cells = [{"rule": rule, "seed": args.seed + s, "L": args.L, "d": args.d, "h": args.h, "tol": args.tol,
              "loss": args.loss} for rule in rules for s in range(args.seeds)]
    threads = resolve_threads(args.threads)
    logger.info(f"gradcheck: {len(cells)} cells, L={args.L} d={args.d} h={args.h:g} tol={args.tol:g}")
    reports = ordered_map(_gradcheck_cell, cells, threads)
    if args.model:
        reports.append(_model_gradcheck(args.model_rule, args.seed, args.h, args.model_tol))
    passed = all(r["passed"] for r in reports)
    write_json({"passed": passed, "reports": reports}, args.out)
    for r in reports:
        level = logging.INFO if r["passed"] else logging.WARNING
        logger.log(level, f"{r['label']}: max_rel_error={r['max_rel_error']:.3e} "
                          f"worst={r['worst_field']}{r['worst_index']} {'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAILURE


# ===== bench =====
def cmd_bench(args) -> int:
    rules = _rule_names(args.rule, ("kda", "fg2gdn", "fg2gdn_plus"))
    if args.prefill:
        cases = prefill_grid(rules, args.budget, args.prefill_L, args.d, args.C[0])
    else:
        for rule in rules:
            if not get_rule(rule).chunkwise:
                raise UnsupportedRuleError(f"chunkwise unsupported for rule '{rule}'")
        cases = bench_grid(rules, args.L, args.C, args.d, include_sequential=not args.no_sequential)
    logger.info(f"bench: {len(cases)} cells × {args.repeats} repetitions (warmup {args.warmup})")
    rows = []
    for case in cases:
        rows.extend(run_case(case, args.repeats, args.warmup, args.seed))
    write_csv(rows, BENCH_COLUMNS, args.out)
    if args.prefill:
        for summary in prefill_ratios(rows):
            logger.info(f"prefill {summary['rule']}: tokens/s at L={summary['long_L']} over "
                        f"L={summary['short_L']} = {summary['long_over_short']:.3f}")
    else:
        for (L, C, _), ratio in sorted(overhead_ratio(rows).items()):
            logger.info(f"fg2gdn/kda chunkwise time ratio at L={L} C={C}: {ratio:.3f}")
    return EXIT_OK


# ===== train / eval / compare =====
def _run_with_overrides(run: RunConfig, rule: Optional[str] = None, seed: Optional[int] = None,
                        steps: Optional[int] = None) -> RunConfig:
    data = run.to_json_dict()
    if rule is not None:
        data["model"]["rule"] = rule
    if seed is not None:
        data["model"]["seed"] = seed
        data["train"]["seed"] = seed
    if steps is not None:
        data["train"]["total_steps"] = steps
        data["train"]["warmup_steps"] = min(data["train"]["warmup_steps"], max(0, steps - 1))
    return parse_config(RunConfig, data, source="command-line overrides")


def cmd_train(args) -> int:
    run = _run_with_overrides(load_run_config(args.config), args.rule, args.seed, args.steps)
    out_dir = args.out_dir or os.path.join("runs", run.name)
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.ndjson")
    checkpoint_path = os.path.join(out_dir, "checkpoint.dkcp")
    try:
        result = train_loop(run, metrics_path=metrics_path, checkpoint_path=checkpoint_path,
                            progress=args.progress)
    except TrainingDivergedError as exc:
        logger.error(f"{exc} (last good checkpoint: {exc.last_good_path})")
        return EXIT_FAILURE
    final = result.history[-1] if result.history else {}
    write_json({"name": run.name, "rule": run.model.rule, "checkpoint": result.checkpoint_path,
                "metrics": metrics_path, "final": final}, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    header = read_header(args.checkpoint)
    logger.info(f"checkpoint {args.checkpoint}: version={header.version} tensors={len(header.tensors)} "
                f"rule={header.config.get('model', {}).get('rule')}")
    params, run = load_trained(args.checkpoint)
    result = evaluate(params, run.model, run.task, seed=args.seed, seq_len=args.seq_len,
                      batches=args.batches, path=args.path)
    write_json({"checkpoint": args.checkpoint, "rule": run.model.rule, "seed": args.seed, **result.to_dict()},
               args.out)
    return EXIT_OK


def _compare_cell(cell: Dict) -> Dict:
    result = train_loop(cell["run"])
    final = result.history[-1] if result.history else {}
    return {"rule": cell["run"].model.rule, "seed": cell["seed"], "steps": cell["run"].train.total_steps,
            "final_loss": final.get("loss", float("nan")), "final_recall": final.get("recall", float("nan"))}


def cmd_compare(args) -> int:
    base = load_run_config(args.config)
    rules = _rule_names(args.rules, ("gdn", "kda", "fg2gdn", "fg2gdn_plus"))
    cells = [{"run": _run_with_overrides(base, rule, seed, args.steps), "seed": seed}
             for rule in rules for seed in args.seeds]
    rows = ordered_map(_compare_cell, cells, resolve_threads(args.threads))
    write_csv(rows, COMPARE_COLUMNS, args.out)
    if args.out:
        write_text(format_table(rows, COMPARE_COLUMNS))
    for rule in rules:
        recalls = [r["final_recall"] for r in rows if r["rule"] == rule]
        logger.info(f"compare {rule}: mean final recall {np.mean(recalls):.3f} over {len(recalls)} seed(s)")
    return EXIT_OK


def cmd_rules(args) -> int:
    catalog = rule_catalog()
    if args.format == "json":
        write_json(catalog, args.out)
    elif args.format == "csv":
        write_csv(catalog, CATALOG_COLUMNS, args.out)
    else:
        rows = [{**row, "delta": "✓" if row["delta"] else "", "chunkwise": "yes" if row["chunkwise"] else "no"}
                for row in catalog]
        write_text(format_table(rows, CATALOG_COLUMNS), args.out)
    return EXIT_OK


# ===== parser =====
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltakit", description="Gated delta-rule recurrences: "
                                     "verification, gradient checks, benchmarks and recall training.")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING... (env DELTAKIT_LOG_LEVEL)")
    parser.add_argument("--log-dir", default=None, help="rotating log directory (env DELTAKIT_LOG_DIR)")
    parser.add_argument("--no-log-file", action="store_true", help="do not write a log file")
    parser.add_argument("--quiet", action="store_true", help="no log output on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="chunkwise vs. sequential oracle equivalence")
    p.add_argument("--rule", action="append", help="rule name (repeatable); default: all chunkwise rules")
    p.add_argument("--all", action="store_true", help="every chunkwise-capable rule")
    p.add_argument("--full", action="store_true",
                   help="every chunkwise rule over L 1 5 64 257 1024, C 1 2 3 16 64 L, 20 seeds")
    p.add_argument("--L", type=int, nargs="+", default=[1, 5, 64, 257])
    p.add_argument("--C", type=int, nargs="+", default=[1, 3, 16, 64])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-k", type=int, default=16)
    p.add_argument("--d-v", type=int, default=None)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--sequential-only", action="store_true",
                   help="check windowed sequential scans instead (works for rwkv7)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("gradcheck", help="analytic backward vs. central differences")
    p.add_argument("--rule", action="append", help="rule name (repeatable); default: all rules")
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--loss", choices=("sum_squares", "cross_entropy"), default="sum_squares")
    p.add_argument("--model", action="store_true", help="also check a 2-layer hybrid model")
    p.add_argument("--model-rule", default="fg2gdn")
    p.add_argument("--model-tol", type=float, default=1e-4)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench", help="median-of-k wall times")
    p.add_argument("--rule", action="append", help="rule name (repeatable); default: kda fg2gdn fg2gdn_plus")
    p.add_argument("--L", type=int, nargs="+", default=[1024])
    p.add_argument("--C", type=int, nargs="+", default=[64])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--no-sequential", action="store_true")
    p.add_argument("--prefill", action="store_true", help="fixed token budget sweep against softmax attention")
    p.add_argument("--budget", type=int, default=8192)
    p.add_argument("--prefill-L", type=int, nargs="+", default=[256, 512, 1024, 2048])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("train", help="train on MQAR from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--rule", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.add_argument("--out", default=None, help="summary JSON path (default stdout)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="recall of a checkpoint on held-out episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--seq-len", type=int, default=None, help="override episode length")
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--path", choices=("sequential", "chunkwise"), default="sequential")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("compare", help="final recall of several rules × seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--rules", nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("rules", help="print the update-rule catalog")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_rules)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    load_environment()
    try:
        setup_logger(console_logging_enabled=not args.quiet, log_level=resolve_log_level(args.log_level),
                     log_dir=None if args.no_log_file else resolve_log_dir(args.log_dir))
        return args.handler(args)
    except USAGE_ERRORS as exc:
        logger.error(f"{args.command}: {exc}")
        for detail in getattr(exc, "errors", []) or []:
            logger.error(f"  {detail.get('field')}: {detail.get('error')}")
        print(f"deltakit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DeltaKitError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
