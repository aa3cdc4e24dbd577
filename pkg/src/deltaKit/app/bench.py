"""
Wall-clock microbenchmarks: median of k timed repetitions after warmup runs.

Rows are emitted per repetition so that a CSV with a grid of G cells and k
repetitions holds exactly k·G measurement rows; every row of a cell carries
the cell's median and the throughput derived from it.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from deltaKit.core.chunkwise import run_chunkwise
from deltaKit.core.numerics import Rng
from deltaKit.core.scan import random_inputs, run_sequential
from deltaKit.model.layers import causal_attention_forward

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ("rule", "path", "L", "C", "d", "batch", "rep", "wall_ns", "wall_ns_median_of_k", "tokens_per_s")
PATHS = ("sequential", "chunkwise", "attention")
SOFTMAX = "softmax"


@dataclass(frozen=True)
class BenchCase:
    rule: str
    path: str
    L: int
    C: Optional[int]
    d: int
    batch: int = 1

    @property
    def tokens(self) -> int:
        return self.batch * self.L


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> List[int]:
    """Nanosecond wall times of `repeats` calls, after `warmup` untimed calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - start)
    return times


def _callable_for(case: BenchCase, seed: int) -> Callable[[], object]:
    lanes = (case.batch,) if case.batch > 1 else ()
    if case.path == "attention":
        rng = Rng(seed)
        q, k, v = (rng.normal(lanes + (case.L, case.d)) for _ in range(3))
        return lambda: causal_attention_forward(q, k, v)
    inputs = random_inputs(case.rule, case.L, case.d, case.d, lanes=lanes, seed=seed)
    if case.path == "sequential":
        return lambda: run_sequential(inputs)
    return lambda: run_chunkwise(inputs, case.C)


def run_case(case: BenchCase, repeats: int = 5, warmup: int = 1, seed: int = 0) -> List[Dict[str, object]]:
    times = time_call(_callable_for(case, seed), repeats, warmup)
    median = int(np.median(times))
    throughput = case.tokens / (median * 1e-9) if median > 0 else float("inf")
    logger.debug(f"bench {case.rule}/{case.path} L={case.L} C={case.C} median={median}ns")
    return [{
        "rule": case.rule, "path": case.path, "L": case.L, "C": "" if case.C is None else case.C,
        "d": case.d, "batch": case.batch, "rep": rep, "wall_ns": ns,
        "wall_ns_median_of_k": median, "tokens_per_s": round(throughput, 3),
    } for rep, ns in enumerate(times)]


def bench_grid(rules: Sequence[str], lengths: Sequence[int], chunk_sizes: Sequence[int], d: int,
               include_sequential: bool = True) -> List[BenchCase]:
    """Sequential (once per L) and chunkwise (per C ≤ L) cells for every rule."""
    cases = []
    for rule in rules:
        for L in lengths:
            if include_sequential:
                cases.append(BenchCase(rule, "sequential", L, None, d))
            for C in sorted({min(C, L) for C in chunk_sizes}):
                cases.append(BenchCase(rule, "chunkwise", L, C, d))
    return cases


def prefill_grid(rules: Sequence[str], budget: int, lengths: Sequence[int], d: int,
                 chunk_size: int = 64) -> List[BenchCase]:
    """Fixed token budget: batch = budget // L, for each linear rule and for softmax attention."""
    cases = []
    for L in lengths:
        batch = max(1, budget // L)
        for rule in rules:
            cases.append(BenchCase(rule, "chunkwise", L, min(chunk_size, L), d, batch))
        cases.append(BenchCase(SOFTMAX, "attention", L, None, d, batch))
    return cases


def medians(rows: Sequence[Dict[str, object]]) -> Dict[tuple, int]:
    """(rule, path, L, C, batch) -> median wall ns."""
    return {(r["rule"], r["path"], r["L"], r["C"], r["batch"]): int(r["wall_ns_median_of_k"]) for r in rows}


def overhead_ratio(rows: Sequence[Dict[str, object]], numerator: str = "fg2gdn", denominator: str = "kda",
                   path: str = "chunkwise") -> Dict[tuple, float]:
    """Median wall-time ratio numerator/denominator for every (L, C, batch) both rules were timed at."""
    table = medians(rows)
    ratios = {}
    for (rule, p, L, C, batch), ns in table.items():
        if rule == numerator and p == path and (denominator, p, L, C, batch) in table:
            ratios[(L, C, batch)] = ns / table[(denominator, p, L, C, batch)]
    return ratios


def prefill_ratios(rows: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    """Per mixer: throughput at the longest L divided by throughput at the shortest L."""
    by_mixer: Dict[str, Dict[int, float]] = {}
    for r in rows:
        by_mixer.setdefault(r["rule"], {})[int(r["L"])] = float(r["tokens_per_s"])
    summary = []
    for mixer, per_length in by_mixer.items():
        short, long = min(per_length), max(per_length)
        summary.append({"rule": mixer, "short_L": short, "long_L": long,
                        "long_over_short": per_length[long] / per_length[short]})
    return summary
