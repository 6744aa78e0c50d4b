"""Experiment driver: sequential and suspension loops, regret bookkeeping, traces."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import acq_ci
from .acq_ci import CIParams
from .acq_ei import BaseSamples, EIContext, maximize_ei
from .baselines import CboParams, cbo_select, fb_select, random_select
from .benchmarks import BenchmarkInstance, build_benchmark, true_optimum
from .cascade import (CascadeModel, EvalRecord, ObservationLog, append_observation,
                      eval_stage)
from .config import SEQUENTIAL_METHODS, SUSPENSION_METHODS, RunConfig
from .errors import CascadeError, InvalidArgument, Unsupported
from .gp import (LOG_AMPLITUDE_BOUNDS, LOG_LENGTHSCALE_BOUNDS, KernelSpec, StageDataset,
                 fit_hyperparams, fit_posterior)
from .optim import MultiStartMaximizer
from .suspension import (CostVector, StockLedger, any_start_fits, apply_observation, select_suspension,
                         stock_reduction)

log = logging.getLogger(__name__)

GP_NOISE = 1e-4
TRACE_COLUMNS = ("seed", "t", "stage", "x", "y", "best_so_far", "simple_regret", "spent_cost", "ci_gap")
STREAMS = {"init": 1, "base": 2, "optimizer": 3, "benchmark": 4, "random": 5, "hyper": 6}
CI_METHODS = ("ci", "cucb")


def substream(seed: int, stream: str, counter: int = 0) -> np.random.Generator:
    """Independent generator for one consumer; adding consumers never shifts others."""
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[stream], counter]))


def subseed(seed: int, stream: str, counter: int = 0) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[stream], counter]).generate_state(1)[0])


@dataclass(frozen=True)
class TraceRow:
    seed: int
    t: int
    stage: int
    x: tuple[float, ...]
    y: tuple[float, ...]
    best_so_far: float
    simple_regret: float
    spent_cost: float
    ci_gap: float | None = None


@dataclass
class SeedResult:
    seed: int
    rows: list[TraceRow]
    f_star: float
    final_regret: float
    best_value: float
    stop_iteration: int | None = None
    wall_time: float = 0.0
    error: str | None = None
    ledger_events: list[dict] = field(default_factory=list)
    lcb_history: list[tuple[float, list]] = field(default_factory=list)


# --- model fitting --------------------------------------------------------------------------

def _initial_kernel(ds: StageDataset, lower, upper) -> KernelSpec:
    lo_l, hi_l = math.exp(LOG_LENGTHSCALE_BOUNDS[0]), math.exp(LOG_LENGTHSCALE_BOUNDS[1])
    lo_a, hi_a = math.exp(LOG_AMPLITUDE_BOUNDS[0]), math.exp(LOG_AMPLITUDE_BOUNDS[1])
    amp = float(np.clip(np.var(ds.y) if ds.n > 1 else 1.0, lo_a, hi_a))
    lx = tuple(float(np.clip(0.5 * (h - l) if h > l else 1.0, lo_l, hi_l)) for l, h in zip(lower, upper))
    if ds.w.shape[1]:
        span = np.ptp(ds.w, axis=0) if ds.n > 1 else np.ones(ds.w.shape[1])
        lw = tuple(float(np.clip(0.5 * s if s > 0 else 1.0, lo_l, hi_l)) for s in span)
    else:
        lw = ()
    return KernelSpec("gaussian", amp, lw, lx)


def fit_models(bench: BenchmarkInstance, obs: ObservationLog, kernels: list | None,
               seed: int, counter: int) -> tuple[CascadeModel, list[KernelSpec]]:
    """Posterior per stage: true kernels for sample paths, evidence-fitted otherwise."""
    spec = bench.cascade
    new_kernels, posts = [], []
    for n in range(1, spec.n_stages + 1):
        ds = obs.dataset(n)
        if bench.true_kernels is not None:
            kern = bench.true_kernels[n - 1]
        else:
            st = spec.stage(n)
            init = kernels[n - 1] if kernels else _initial_kernel(ds, st.lower, st.upper)
            # warm start from the previous sweep; restarts are seeded per sweep
            kern = fit_hyperparams(ds, init, GP_NOISE, n_restarts=5,
                                   seed=subseed(seed, "hyper", counter * 64 + n))
        new_kernels.append(kern)
        posts.append(fit_posterior(ds, kern, GP_NOISE))
    return CascadeModel(spec, tuple(posts)), new_kernels


def fit_fb_model(controls: np.ndarray, y: np.ndarray, lower, upper, kernel: KernelSpec | None,
                 seed: int, counter: int):
    ds = StageDataset(np.zeros((controls.shape[0], 0)), controls, y.reshape(-1, 1))
    init = kernel or _initial_kernel(ds, lower, upper)
    kern = fit_hyperparams(ds, init, GP_NOISE, n_restarts=5, seed=subseed(seed, "hyper", counter * 64))
    return fit_posterior(ds, kern, GP_NOISE), kern


# --- CI diagnostics -------------------------------------------------------------------------

def stopping_check(model: CascadeModel, params: CIParams, xi: float | None, optimizer, seed=None):
    """Credible-interval gap ``max UCB - max LCB`` of the full chain.

    Returns ``(fired, gap, lcb_max, lcb_argmax)``; ``fired`` is False when ``xi`` is None.
    """
    lcb_max, x_lcb = acq_ci.pessimistic_argmax(model, params, optimizer, seed=seed)
    ucb_max, _ = acq_ci.optimistic_argmax(model, params, optimizer, seed=seed)
    # the UCB at the LCB maximizer bounds max UCB from below
    ucb_at = float(acq_ci.ci_recursion(model, 1, np.zeros(0), x_lcb[None, :], params).ucb[0])
    gap = max(ucb_max, ucb_at) - lcb_max
    fired = xi is not None and gap < xi
    return fired, float(gap), float(lcb_max), x_lcb


def estimated_solution(history):
    """Controls with the largest per-sweep LCB maximum seen so far.

    ``history`` is a sequence of ``(lcb_max, controls)`` pairs, one per sweep.
    """
    if not history:
        raise Unsupported("no credible-interval history available")
    best_v, best_x = -np.inf, None
    for v, x in history:
        if v > best_v:
            best_v, best_x = v, x
    return best_x


# --- trace rows -----------------------------------------------------------------------------

class _Recorder:
    def __init__(self, seed: int, f_star: float, best: float):
        self.seed = seed
        self.f_star = f_star
        self.best = best
        self.rows: list[TraceRow] = []
        self.t = 0
        self.spent = 0.0

    def observe(self, stage: int, x, y, final: bool, cost: float = 1.0, gap: float | None = None):
        self.t += 1
        self.spent += cost
        y = np.asarray(y, dtype=float).ravel()
        if final:
            self.best = max(self.best, float(y[0]))
        self.rows.append(TraceRow(self.seed, self.t, stage,
                                  tuple(float(v) for v in np.ravel(x)), tuple(float(v) for v in y),
                                  self.best, self.f_star - self.best, self.spent, gap))

    @property
    def regret(self) -> float:
        return self.f_star - self.best


def _initial_design(bench: BenchmarkInstance, n_init: int, seed: int):
    spec = bench.cascade
    rng = substream(seed, "init")
    boxes = [(st.lower, st.upper) for st in spec.stages]
    obs = ObservationLog.empty(spec)
    finals, flat = [], []
    for _ in range(n_init):
        controls = random_select(boxes, rng)
        w = np.zeros(0)
        for n, x in enumerate(controls, start=1):
            y = eval_stage(spec, n, w, x)
            obs = append_observation(obs, EvalRecord(0, n, w, x, y))
            w = y
        finals.append(float(w[0]))
        flat.append(np.concatenate(controls))
    return obs, finals, flat


def _optimizers(cfg: RunConfig, seed: int):
    main = MultiStartMaximizer(replace(cfg.budget, seed=subseed(seed, "optimizer")))
    nested = MultiStartMaximizer(replace(cfg.nested_budget, seed=subseed(seed, "optimizer", 1)))
    return main, nested


def _benchmark_for(cfg: RunConfig, seed: int) -> BenchmarkInstance:
    bseed = seed if cfg.benchmark_seed is None else cfg.benchmark_seed
    return build_benchmark(cfg.benchmark, seed=bseed)


def run_sequential_seed(cfg: RunConfig, seed: int, bench: BenchmarkInstance | None = None,
                        f_star: float | None = None) -> SeedResult:
    if cfg.method not in SEQUENTIAL_METHODS:
        raise InvalidArgument(f"{cfg.method} is not a sequential method")
    start = time.perf_counter()
    bench = bench or _benchmark_for(cfg, seed)
    spec = bench.cascade
    N = spec.n_stages
    if f_star is None:
        f_star = true_optimum(bench)[0]
    n_init = cfg.n_init if cfg.n_init is not None else bench.spec.n_init
    obs, finals, flat = _initial_design(bench, n_init, seed)
    rec = _Recorder(seed, f_star, max(finals) if finals else -np.inf)
    main_opt, nested_opt = _optimizers(cfg, seed)
    params = cfg.ci
    rand = substream(seed, "random")
    boxes = [(st.lower, st.upper) for st in spec.stages]
    kernels, fb_kernel = None, None
    fb_X, fb_y = list(flat), list(finals)
    result = SeedResult(seed, rec.rows, f_star, rec.regret, rec.best)
    need_ci = cfg.method in CI_METHODS or cfg.xi is not None
    stage_costs = CostVector(cfg.costs).values if cfg.costs is not None else (1.0,) * N
    if len(stage_costs) != N:
        raise InvalidArgument(f"need {N} stage costs, got {len(stage_costs)}")

    for sweep in range(1, cfg.iters + 1):
        if cfg.cost_budget is not None and rec.spent + sum(stage_costs) > cfg.cost_budget + 1e-12:
            break
        if cfg.method == "random":
            controls = random_select(boxes, rand)
            model = None
        else:
            model, kernels = fit_models(bench, obs, kernels, seed, sweep)
        gap = None
        if need_ci and model is not None:
            fired, gap, lcb_max, x_lcb = stopping_check(model, params, cfg.xi, nested_opt,
                                                        seed=subseed(seed, "optimizer", 10_000 + sweep))
            result.lcb_history.append((lcb_max, spec.split_controls(x_lcb)))
            if fired:
                result.stop_iteration = sweep
                break
        f_best = rec.best
        opt_seed = subseed(seed, "optimizer", 2 + sweep)
        if cfg.method == "fb-ei" or cfg.method == "fb-ucb":
            lo, hi = spec.joint_box()
            gp, fb_kernel = fit_fb_model(np.array(fb_X), np.array(fb_y), lo, hi, fb_kernel, seed, sweep)
            x = fb_select(gp, cfg.method[3:], f_best, lo, hi, main_opt, seed=opt_seed)
            controls = spec.split_controls(x)
        elif cfg.method == "cbo":
            controls, _ = cbo_select(model, CboParams(), f_best, main_opt, bench.output_ranges, seed=opt_seed)
        elif cfg.method == "cucb":
            lo, hi = spec.joint_box()
            res = main_opt.maximize(lambda P: acq_ci.cucb(model, P, params), lo, hi, seed=opt_seed)
            controls = spec.split_controls(res.x)

        w = np.zeros(0)
        q = None
        used = []
        for n in range(1, N + 1):
            if cfg.method == "ei":
                base = BaseSamples.draw(spec.output_dims, cfg.n_samples,
                                        seed=subseed(seed, "base", sweep * 64 + n))
                ctx = EIContext(model, f_best, base)
                x, _, _ = maximize_ei(ctx, w, n, main_opt, seed=subseed(seed, "optimizer", sweep * 64 + n))
            elif cfg.method == "ci":
                if q is None:
                    q = acq_ci.q_t(model, params, nested_opt, seed=subseed(seed, "optimizer", 20_000 + sweep))
                x, _ = acq_ci.ci_select(model, w, n, rec.t + 1, params, main_opt, q=q,
                                        nested_optimizer=nested_opt,
                                        seed=subseed(seed, "optimizer", sweep * 64 + n))
            else:
                x = controls[n - 1]
            x = np.clip(x, spec.stage(n).lower, spec.stage(n).upper)
            y = eval_stage(spec, n, w, x)
            obs = append_observation(obs, EvalRecord(rec.t + 1, n, w, x, y))
            rec.observe(n, x, y, final=(n == N), cost=stage_costs[n - 1], gap=gap if n == 1 else None)
            used.append(x)
            w = y
        fb_X.append(np.concatenate(used))
        fb_y.append(float(w[0]))

    result.final_regret = rec.regret
    result.best_value = rec.best
    result.wall_time = time.perf_counter() - start
    return result


def run_suspension_seed(cfg: RunConfig, seed: int, bench: BenchmarkInstance | None = None,
                        f_star: float | None = None) -> SeedResult:
    if cfg.method not in SUSPENSION_METHODS:
        raise InvalidArgument(f"{cfg.method} is not a suspension method")
    start = time.perf_counter()
    bench = bench or _benchmark_for(cfg, seed)
    spec = bench.cascade
    N = spec.n_stages
    costs = CostVector(cfg.costs)
    if len(costs.values) != N:
        raise InvalidArgument(f"need {N} stage costs, got {len(costs.values)}")
    if f_star is None:
        f_star = true_optimum(bench)[0]
    n_init = cfg.n_init if cfg.n_init is not None else bench.spec.n_init
    obs, finals, _ = _initial_design(bench, n_init, seed)
    rec = _Recorder(seed, f_star, max(finals) if finals else -np.inf)
    main_opt, nested_opt = _optimizers(cfg, seed)
    ledger = StockLedger.initial(cfg.reuse)
    kernels = None
    result = SeedResult(seed, rec.rows, f_star, rec.regret, rec.best)
    it = 0
    while any_start_fits(ledger, costs, cfg.cost_budget - rec.spent):
        it += 1
        model, kernels = fit_models(bench, obs, kernels, seed, it)
        base = BaseSamples.draw(spec.output_dims, cfg.n_samples, seed=subseed(seed, "base", it))
        ctx = EIContext(model, rec.best, base)
        choice = select_suspension(ledger, ctx, costs, main_opt, budget_left=cfg.cost_budget - rec.spent,
                                   seed=subseed(seed, "optimizer", it))
        stock = ledger.get(choice.stock_id)
        x = np.clip(choice.x, spec.stage(choice.stage).lower, spec.stage(choice.stage).upper)
        y = eval_stage(spec, choice.stage, stock.value, x)
        obs = append_observation(obs, EvalRecord(rec.t + 1, choice.stage, stock.value, x, y))
        rec.observe(choice.stage, x, y, final=(choice.stage == N), cost=costs.stage(choice.stage))
        new_id = ledger.next_id if choice.stage < N else None
        ledger = apply_observation(ledger, choice, y, rec.t, N)
        event = {"seed": seed, "t": rec.t, "stage": choice.stage, "stock": choice.stock_id,
                 "score": choice.score, "spent": rec.spent}
        if cfg.method == "ei-sus-r" and any(s.stage > 0 for s in ledger.stocks):
            model_r, _ = fit_models(bench, obs, kernels, seed, it)
            ledger, gone, bounds = stock_reduction(ledger, model_r, cfg.ci, nested_opt, exempt_id=new_id,
                                                   t=rec.t, seed=subseed(seed, "optimizer", 30_000 + it))
            event["discarded"] = [
                {"id": d.stock_id, "stage": d.stage, "value": list(d.value), "lcb": d.lcb,
                 "ucb": d.ucb, "threshold": d.threshold} for d in ledger.discards if d.t == rec.t]
        event["ledger"] = ledger.snapshot()
        result.ledger_events.append(event)

    result.final_regret = rec.regret
    result.best_value = rec.best
    result.wall_time = time.perf_counter() - start
    return result


def run_seed(cfg: RunConfig, seed: int, bench: BenchmarkInstance | None = None,
             f_star: float | None = None) -> SeedResult:
    if cfg.method in SUSPENSION_METHODS:
        return run_suspension_seed(cfg, seed, bench, f_star)
    return run_sequential_seed(cfg, seed, bench, f_star)


def run_sequential(cfg: RunConfig) -> list[SeedResult]:
    return [_guarded(cfg, s) for s in cfg.seeds]


def run_suspension(cfg: RunConfig) -> list[SeedResult]:
    return [_guarded(cfg, s) for s in cfg.seeds]


def _guarded(cfg: RunConfig, seed: int) -> SeedResult:
    try:
        return run_seed(cfg, seed)
    except CascadeError as exc:
        log.error("seed %d aborted: %s", seed, exc)
        return SeedResult(seed, [], math.nan, math.nan, math.nan, error=str(exc))


# --- persistence ----------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_trace(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([r.seed, r.t, r.stage, ";".join(_fmt(v) for v in r.x),
                             ";".join(_fmt(v) for v in r.y), _fmt(r.best_so_far), _fmt(r.simple_regret),
                             _fmt(r.spent_cost), "" if r.ci_gap is None else _fmt(r.ci_gap)])


def read_trace(path) -> list[TraceRow]:
    def vec(s):
        return tuple(float(v) for v in s.split(";")) if s else ()

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise InvalidArgument(f"unexpected trace header {header}")
        return [TraceRow(int(r[0]), int(r[1]), int(r[2]), vec(r[3]), vec(r[4]), float(r[5]), float(r[6]),
                         float(r[7]), float(r[8]) if r[8] else None) for r in reader]


def summarize(cfg: RunConfig, results: list[SeedResult]) -> dict:
    regrets = [r.final_regret for r in results if r.error is None]
    best = [r.best_value for r in results if r.error is None]
    return {
        "config": cfg.to_dict(),
        "f_star": {str(r.seed): r.f_star for r in results},
        "final_regret": {str(r.seed): r.final_regret for r in results},
        "best_value": {str(r.seed): r.best_value for r in results},
        "stop_iteration": {str(r.seed): r.stop_iteration for r in results},
        "wall_time": {str(r.seed): r.wall_time for r in results},
        "errors": {str(r.seed): r.error for r in results if r.error},
        "mean_final_regret": float(np.mean(regrets)) if regrets else None,
        "median_final_regret": float(np.median(regrets)) if regrets else None,
        "mean_best_value": float(np.mean(best)) if best else None,
        "median_best_value": float(np.median(best)) if best else None,
    }


def write_outputs(cfg: RunConfig, results: list[SeedResult], out_dir) -> dict:
    """Per-seed traces, a merged trace, ledger events and the summary JSON."""
    os.makedirs(out_dir, exist_ok=True)
    stem = f"{cfg.benchmark}_{cfg.method}"
    all_rows = []
    for r in sorted(results, key=lambda r: r.seed):
        write_trace(r.rows, os.path.join(out_dir, f"{stem}_seed{r.seed}.csv"))
        all_rows.extend(r.rows)
        if r.ledger_events:
            with open(os.path.join(out_dir, f"{stem}_seed{r.seed}_ledger.jsonl"), "w", encoding="utf-8") as fh:
                for ev in r.ledger_events:
                    fh.write(json.dumps(ev) + "\n")
    write_trace(all_rows, os.path.join(out_dir, f"{stem}.csv"))
    summary = summarize(cfg, results)
    with open(os.path.join(out_dir, f"{stem}_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
