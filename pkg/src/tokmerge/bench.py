"""Benchmark engine: cost/fidelity measurement, strategy comparison, replay.

All randomized comparisons are matched-seed: every strategy sees the same
initial noise, the same per-step ancestral noise, and the same per
(timestep, layer) plan-draw streams.
"""

from __future__ import annotations

import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .core import (
    STRATEGY_GRID,
    STRATEGY_NONE,
    STRATEGY_POOL,
    STRATEGY_TOPK,
    ConfigInfeasibleError,
    ImportanceMap,
    MergeConfig,
    MergePlan,
    TokenMatrix,
    apply_merge,
    apply_unmerge,
    counts_for,
    identity_plan,
)
from .flops import FlopModel
from .fmap import CaptureRecord, write_capture
from .importance import rank_tokens
from .matching import paired_cosine
from .rng import Rng
from .strategy import plan_importance_pool, plan_tome_grid, plan_topk_dst
from .toydiff import MODE_MERGE, NoiseSchedule, ToyDenoiser, attention, sample

# Stream id offset for the random-assignment control oracle.
_CONTROL_LAYER = 1 << 19

BENCH_COLUMNS = [
    "strategy", "r", "k", "p", "prune_steps", "steps", "tokens", "channels",
    "flops_per_step", "latency_step_s", "peak_mem_bytes", "mse_vs_baseline",
    "status",
]
COMPARE_COLUMNS = [
    "strategy", "r", "k", "p", "n_seeds", "n_conditions", "mse_mean",
    "mse_median", "mse_p95", "pool_violations", "homogeneity_mean",
    "homogeneity_random", "status",
]
REPLAY_COLUMNS = [
    "record", "timestep", "layer", "n_tokens", "n_channels", "strategy",
    "expected_n_out", "actual_n_out", "count_ok", "homogeneity",
    "homogeneity_random", "status",
]


@dataclass(frozen=True)
class HarnessParams:
    """Shared sampling/benchmark knobs (one place for the CLI defaults)."""

    tokens: int = 64
    channels: int = 16
    steps: int = 50
    cfg_scale: float = 7.5
    dst_frac: float = 0.25
    pool_factor: float = 0.4
    prune_steps: int = 6
    seed: int = 0

    def grid(self) -> tuple[int, int]:
        side = math.isqrt(self.tokens)
        if side * side != self.tokens or side % 2:
            raise ConfigInfeasibleError(
                f"--tokens {self.tokens} must be a perfect square with an even side"
            )
        return side, side

    def config(self, strategy: str, ratio: float, seed: int | None = None) -> MergeConfig:
        return MergeConfig(
            strategy,
            ratio,
            k=self.dst_frac,
            p=self.pool_factor,
            prune_steps=self.prune_steps,
            seed=self.seed if seed is None else seed,
        )

    def model(self, n_classes: int = 8) -> ToyDenoiser:
        return ToyDenoiser(self.channels, n_classes=n_classes, seed=0)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.steps)


def merge_group_cohesion(data: np.ndarray, plan: MergePlan) -> float | None:
    """Mean cosine similarity of each merged token to its assigned dst."""
    if plan.n_merged == 0:
        return None
    sims = paired_cosine(data[plan.merged_sources], data[plan.merged_targets])
    return float(sims.mean())


def random_assignment_cohesion(
    data: np.ndarray, plan: MergePlan, gen: np.random.Generator
) -> float | None:
    """Control oracle: cohesion if merged tokens were assigned to random dst."""
    if plan.n_merged == 0:
        return None
    targets = plan.dst_indices[gen.integers(0, plan.dst_indices.size, plan.n_merged)]
    sims = paired_cosine(data[plan.merged_sources], data[targets])
    return float(sims.mean())


def _pool_violations(tokens: TokenMatrix, importance: ImportanceMap, plan: MergePlan,
                     config: MergeConfig) -> int:
    """How many dst/independent indices fall outside the top-K importance set."""
    counts = counts_for(tokens.n_tokens, config)
    in_pool = np.zeros(tokens.n_tokens, dtype=bool)
    in_pool[rank_tokens(importance)[: counts.pool_size]] = True
    selected = np.concatenate([plan.dst_indices, plan.independent_indices])
    return int(np.count_nonzero(~in_pool[selected]))


def _mse(a: TokenMatrix, b: TokenMatrix) -> float:
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def _mean_or_nan(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def run_bench(
    strategies: list[str],
    ratios: list[float],
    params: HarnessParams,
    n_seeds: int = 1,
    repeats: int = 5,
    warmups: int = 2,
    condition: int = 0,
) -> list[dict]:
    """One CSV row per (strategy, ratio) pair plus the unmerged baseline row.

    Latency is the median full-trajectory wall clock over ``repeats`` runs
    (after ``warmups``) divided by the step count; fidelity is the MSE of the
    final sample against the strategy=none baseline under identical seeds.
    Infeasible pairs produce a row with status "infeasible" and the run
    continues.
    """
    grid = params.grid()
    model = params.model()
    schedule = params.schedule()
    seeds = [params.seed + i for i in range(max(1, n_seeds))]

    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        def timed_run(config: MergeConfig, seed: int) -> tuple[TokenMatrix, float, int]:
            tracemalloc.reset_peak()
            times = []
            out = None
            for _ in range(warmups + repeats):
                t0 = time.perf_counter()
                out = sample(model, schedule, config, params.cfg_scale, condition,
                             Rng(seed), grid)
                times.append(time.perf_counter() - t0)
            peak = tracemalloc.get_traced_memory()[1]
            return out, statistics.median(times[warmups:]), peak

        flop = FlopModel(params.tokens, params.channels, model.n_hidden,
                         n_blocks=model.n_blocks)

        baselines = {}
        base_cfg = params.config(STRATEGY_NONE, 0.0, seeds[0])
        base_out, base_latency, base_peak = timed_run(base_cfg, seeds[0])
        baselines[seeds[0]] = base_out
        for s in seeds[1:]:
            baselines[s] = sample(model, schedule, params.config(STRATEGY_NONE, 0.0, s),
                                  params.cfg_scale, condition, Rng(s), grid)

        def row(strategy, r, **fields):
            base = {c: "" for c in BENCH_COLUMNS}
            base.update(
                strategy=strategy, r=r, k=params.dst_frac, p=params.pool_factor,
                prune_steps=params.prune_steps, steps=params.steps,
                tokens=params.tokens, channels=params.channels, status="ok",
            )
            base.update(fields)
            return base

        rows = [
            row(
                STRATEGY_NONE, 0.0,
                flops_per_step=flop.step_flops(),
                latency_step_s=base_latency / params.steps,
                peak_mem_bytes=base_peak,
                mse_vs_baseline=0.0,
            )
        ]
        for strategy in strategies:
            if strategy == STRATEGY_NONE:
                continue
            for r in ratios:
                try:
                    config = params.config(strategy, r, seeds[0])
                    counts = counts_for(params.tokens, config)
                    out, latency, peak = timed_run(config, seeds[0])
                    mses = [_mse(out, baselines[seeds[0]])]
                    for s in seeds[1:]:
                        extra = sample(model, schedule, params.config(strategy, r, s),
                                       params.cfg_scale, condition, Rng(s), grid)
                        mses.append(_mse(extra, baselines[s]))
                except ConfigInfeasibleError as exc:
                    rows.append(row(strategy, r, status=f"infeasible: {exc}"))
                    continue
                rows.append(
                    row(
                        strategy, r,
                        flops_per_step=flop.step_flops(counts.n_out),
                        latency_step_s=latency / params.steps,
                        peak_mem_bytes=peak,
                        mse_vs_baseline=float(np.mean(mses)),
                    )
                )
        return rows
    finally:
        if not was_tracing:
            tracemalloc.stop()


def run_compare(
    strategies: list[str],
    ratio: float,
    params: HarnessParams,
    n_seeds: int = 32,
    n_conditions: int = 4,
) -> list[dict]:
    """Matched-seed strategy comparison over a seed x condition grid.

    Reports deviation statistics against the unmerged baseline, merge-group
    cohesion with its random-assignment control, and the pool-containment
    violation count (which must be zero for the importance-pool strategy).
    """
    if len(strategies) < 2:
        raise ConfigInfeasibleError("compare needs at least 2 strategies")
    grid = params.grid()
    model = params.model(n_classes=max(8, n_conditions))
    schedule = params.schedule()

    baselines: dict[tuple[int, int], TokenMatrix] = {}
    for s in range(n_seeds):
        for cond in range(n_conditions):
            seed = params.seed + s
            baselines[(s, cond)] = sample(
                model, schedule, params.config(STRATEGY_NONE, 0.0, seed),
                params.cfg_scale, cond, Rng(seed), grid,
            )

    rows = []
    for strategy in strategies:
        mses: list[float] = []
        cohesions: list[float] = []
        controls: list[float] = []
        violations = 0
        status = "ok"
        try:
            for s in range(n_seeds):
                for cond in range(n_conditions):
                    seed = params.seed + s
                    config = params.config(strategy, ratio, seed)
                    events = []
                    out = sample(model, schedule, config, params.cfg_scale, cond,
                                 Rng(seed), grid, hook=events.append)
                    mses.append(_mse(out, baselines[(s, cond)]))
                    for ev in events:
                        coh = merge_group_cohesion(ev.tokens.data, ev.plan)
                        if coh is not None:
                            cohesions.append(coh)
                            gen = Rng(seed).at(ev.timestep,
                                               _CONTROL_LAYER + ev.layer).generator()
                            controls.append(
                                random_assignment_cohesion(ev.tokens.data, ev.plan, gen)
                            )
                        if (
                            strategy == STRATEGY_POOL
                            and ev.mode == MODE_MERGE
                            and not ev.grid_fallback
                            and ev.importance is not None
                        ):
                            violations += _pool_violations(
                                ev.tokens, ev.importance, ev.plan, config
                            )
        except ConfigInfeasibleError as exc:
            status = f"infeasible: {exc}"
        rows.append(
            {
                "strategy": strategy,
                "r": ratio,
                "k": params.dst_frac,
                "p": params.pool_factor,
                "n_seeds": n_seeds,
                "n_conditions": n_conditions,
                "mse_mean": _mean_or_nan(mses),
                "mse_median": float(np.median(mses)) if mses else float("nan"),
                "mse_p95": float(np.percentile(mses, 95)) if mses else float("nan"),
                "pool_violations": violations,
                "homogeneity_mean": _mean_or_nan(cohesions),
                "homogeneity_random": _mean_or_nan(controls),
                "status": status,
            }
        )
    return rows


def run_capture(
    out_path, params: HarnessParams, condition: int = 0
) -> tuple[int, int]:
    """Run an unmerged trajectory and dump every attention-layer input.

    One record per (step, layer) from the conditional pass: the layer's input
    tokens plus the guidance map that would drive planning at that step
    (zeros at the first step, where no previous-step map exists yet).
    Returns (record count, bytes written).
    """
    grid = params.grid()
    model = params.model()
    schedule = params.schedule()
    events = []
    sample(
        model, schedule, params.config(STRATEGY_NONE, 0.0), params.cfg_scale,
        condition, Rng(params.seed), grid, hook=events.append,
    )
    records = []
    for ev in events:
        if ev.pass_id != "cond":
            continue
        n = ev.tokens.n_tokens
        if ev.importance is not None and len(ev.importance) == n:
            guidance = ev.importance.scores.astype(np.float32)
        else:
            guidance = np.zeros(n, dtype=np.float32)
        records.append(
            CaptureRecord(
                ev.timestep, ev.layer,
                ev.tokens.data.astype(np.float32, copy=False), guidance,
            )
        )
    n_bytes = write_capture(out_path, records)
    return len(records), n_bytes


def plan_for_record(
    record: CaptureRecord, strategy: str, config: MergeConfig, base: Rng
) -> MergePlan:
    """Rebuild the plan a strategy would produce for one captured record.

    Uses the record's (timestep, layer) stream of ``base``, so matched seeds
    reproduce in-loop draws.  The grid strategy infers a square token grid.
    """
    n = record.features.shape[0]
    grid = None
    side = math.isqrt(n) if n > 0 else 0
    if side * side == n and side > 0:
        grid = (side, side)
    tokens = TokenMatrix(record.features, grid=grid)
    rng = base.at(record.timestep, record.layer)
    if strategy == STRATEGY_NONE:
        return identity_plan(n)
    if strategy == STRATEGY_GRID:
        return plan_tome_grid(tokens, config, rng)
    importance = ImportanceMap(record.guidance, source_timestep=record.timestep + 1)
    if strategy == STRATEGY_POOL:
        return plan_importance_pool(tokens, importance, config, rng)
    assert strategy == STRATEGY_TOPK
    return plan_topk_dst(tokens, importance, config)


def run_replay(
    records: list[CaptureRecord],
    strategies: list[str],
    ratio: float,
    params: HarnessParams,
) -> list[dict]:
    """Apply each strategy to each captured record offline.

    Per record: merge-group cohesion (with random-assignment control) and a
    reduced-count check.  Malformed records produce an error row and the
    replay continues.
    """
    rows = []
    base = Rng(params.seed)
    for idx, rec in enumerate(records):
        n, c = rec.features.shape
        for strategy in strategies:
            row = {
                "record": idx,
                "timestep": rec.timestep,
                "layer": rec.layer,
                "n_tokens": n,
                "n_channels": c,
                "strategy": strategy,
                "expected_n_out": "",
                "actual_n_out": "",
                "count_ok": "",
                "homogeneity": "",
                "homogeneity_random": "",
                "status": "ok",
            }
            try:
                config = params.config(strategy, ratio)
                if strategy == STRATEGY_NONE:
                    expected = n
                else:
                    expected = counts_for(n, config).n_out
                plan = plan_for_record(rec, strategy, config, base)
                coh = merge_group_cohesion(rec.features, plan)
                gen = base.at(rec.timestep, _CONTROL_LAYER + rec.layer).generator()
                control = random_assignment_cohesion(rec.features, plan, gen)
                row.update(
                    expected_n_out=expected,
                    actual_n_out=plan.n_out,
                    count_ok=plan.n_out == expected,
                    homogeneity="" if coh is None else coh,
                    homogeneity_random="" if control is None else control,
                )
            except (ValueError, ConfigInfeasibleError) as exc:
                row["status"] = f"error: {exc}"
            rows.append(row)
    return rows


def measure_attention_latency(
    n_tokens: int,
    n_channels: int,
    ratio: float,
    seed: int = 0,
    repeats: int = 5,
    warmups: int = 2,
) -> float:
    """Median seconds for one attention layer at the given merge ratio.

    ratio > 0 times the full pipeline (plan build, merge, attention on the
    reduced set, unmerge); ratio == 0 times plain attention, matching the
    engine's bypass path.
    """
    side = math.isqrt(n_tokens)
    if side * side != n_tokens or side % 2:
        raise ConfigInfeasibleError(
            f"n_tokens {n_tokens} must be a perfect square with an even side"
        )
    gen = Rng(seed).at(0, 0).generator()
    x = gen.standard_normal((n_tokens, n_channels), dtype=np.float32)
    wq, wk, wv, wo = (
        gen.standard_normal((n_channels, n_channels), dtype=np.float32)
        * np.float32(0.02)
        for _ in range(4)
    )
    tokens = TokenMatrix(x, grid=(side, side))
    config = None if ratio == 0.0 else MergeConfig(STRATEGY_GRID, ratio, seed=seed)

    def call():
        if config is None:
            attention(x, wq, wk, wv, wo)
            return
        plan = plan_tome_grid(tokens, config, Rng(seed).at(1, 0))
        reduced = apply_merge(tokens, plan)
        a = attention(reduced.data, wq, wk, wv, wo)
        apply_unmerge(TokenMatrix(a), plan)

    times = []
    for _ in range(warmups + repeats):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    return statistics.median(times[warmups:])
