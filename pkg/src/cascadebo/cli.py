"""Command-line entry point.

    cascadebo run --config run.ini [--method ei] [--seed 3] [--iters 20] [--out runs/]
    cascadebo list-benchmarks
    cascadebo oracle --benchmark matyas-3 [--seed 0]
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

from .benchmarks import REGISTRY, build_benchmark, true_optimum
from .config import METHODS, RunConfig, read_config, with_overrides
from .errors import CascadeError
from .harness import SeedResult, run_seed, write_outputs


def _cmd_run(args) -> int:
    cfg = read_config(args.config) if args.config else RunConfig()
    cfg = with_overrides(cfg, method=args.method, iters=args.iters, out=args.out,
                         seeds=None if args.seed is None else (args.seed,))
    results = []
    for seed in cfg.seeds:
        try:
            res = run_seed(cfg, seed)
        except CascadeError as exc:
            logging.error("seed %d aborted: %s", seed, exc)
            res = SeedResult(seed, [], float("nan"), float("nan"), float("nan"), error=str(exc))
        results.append(res)
        print(f"seed {seed}: final regret {res.final_regret:.6g} ({len(res.rows)} evaluations, "
              f"{res.wall_time:.1f}s)")
    summary = write_outputs(cfg, results, cfg.out)
    print(f"median final regret {summary['median_final_regret']}, written to {cfg.out}")
    return 1 if summary["errors"] else 0


def _cmd_list(args) -> int:
    for name, spec in REGISTRY.items():
        dims = "x".join(str(d) for d in spec.control_dims)
        fstar = "search" if spec.kind == "samplepath" or spec.scaled else "analytic"
        print(f"{name}\tN={spec.n_stages}\tdims={dims}\tbox=[{spec.box[0]:g},{spec.box[1]:g}]"
              f"\tscaled={'yes' if spec.scaled else 'no'}\tF*={fstar}")
    return 0


def _cmd_oracle(args) -> int:
    bench = build_benchmark(args.benchmark, seed=args.seed)
    value, controls = true_optimum(bench)
    print(f"{args.benchmark} seed={args.seed} F*={value!r}")
    for n, x in enumerate(controls, start=1):
        print(f"  x{n} = {' '.join(repr(float(v)) for v in x)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadebo", description="Cascade Bayesian optimization experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", help="INI config file")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    run.add_argument("--iters", type=int)
    run.add_argument("--out", help="output directory")
    run.set_defaults(func=_cmd_run)

    lst = sub.add_parser("list-benchmarks", help="list registered benchmarks")
    lst.set_defaults(func=_cmd_list)

    orc = sub.add_parser("oracle", help="print the best known value of a benchmark")
    orc.add_argument("--benchmark", required=True, choices=sorted(REGISTRY))
    orc.add_argument("--seed", type=int, default=0)
    orc.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except CascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
