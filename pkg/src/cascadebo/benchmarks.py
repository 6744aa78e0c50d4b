"""Synthetic cascade benchmarks.

Function chains (negated Rosenbrock, Sphere, Matyas) evaluate the base
function on ``x`` at stage 1 and on ``concat(w, x)`` afterwards.  In the
scaled variants every stage output is mapped affinely onto the control
interval, so each stage's output range matches the next stage's domain.
Sample-path chains draw every stage from a GP prior through random Fourier
features and are used unscaled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cascade import CascadeSpec, StageSpec, cascade_objective
from .errors import InvalidArgument
from .gp import KernelSpec, RFFSample, sample_path
from .optim import MultiStartMaximizer, OptBudget

SCALING_SAMPLES = 100_000
# sample-path ranges only feed the CBO search box, so fewer probes suffice
SAMPLEPATH_RANGE_SAMPLES = 10_000
SAMPLEPATH_AMPLITUDE = 15.02
SAMPLEPATH_LENGTHSCALE = 3.0
SAMPLEPATH_FEATURES = 1000


def _rosenbrock(V: np.ndarray) -> np.ndarray:
    if V.shape[1] < 2:
        raise InvalidArgument("Rosenbrock needs at least 2 dimensions")
    a, b = V[:, :-1], V[:, 1:]
    return -np.sum(100.0 * (b - a ** 2) ** 2 + (a - 1.0) ** 2, axis=1)


def _sphere(V: np.ndarray) -> np.ndarray:
    return -np.sum(V ** 2, axis=1)


def _matyas(V: np.ndarray) -> np.ndarray:
    if V.shape[1] != 2:
        raise InvalidArgument("Matyas is defined in 2 dimensions")
    x, y = V[:, 0], V[:, 1]
    return -(0.26 * (x ** 2 + y ** 2) - 0.48 * x * y)


BASE_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "rosenbrock": _rosenbrock,
    "sphere": _sphere,
    "matyas": _matyas,
}


def base_function_batch(name: str, V) -> np.ndarray:
    if name not in BASE_FUNCTIONS:
        raise InvalidArgument(f"unknown base function {name!r}")
    V = np.atleast_2d(np.asarray(V, dtype=float))
    return BASE_FUNCTIONS[name](V)


def base_function(name: str, v) -> float:
    """Negated test function at a single point."""
    return float(base_function_batch(name, np.asarray(v, dtype=float).reshape(1, -1))[0])


@dataclass(frozen=True, eq=False)
class AffineStage:
    """Evaluator followed by ``y -> scale * y + shift`` per output coordinate."""

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    scale: np.ndarray
    shift: np.ndarray

    def __call__(self, W, X) -> np.ndarray:
        return self.scale * np.asarray(self.evaluator(W, X), dtype=float) + self.shift

    def inverse(self, Y) -> np.ndarray:
        return (np.asarray(Y, dtype=float) - self.shift) / self.scale


def scale_stage(evaluator, target_range, W, X) -> AffineStage:
    """Affine rescaling so the outputs at the probe inputs span ``target_range`` exactly."""
    lo_t, hi_t = (np.asarray(v, dtype=float) for v in target_range)
    if not (np.all(np.isfinite(lo_t)) and np.all(np.isfinite(hi_t))):
        raise InvalidArgument("target range must be finite")
    Y = np.asarray(evaluator(W, X), dtype=float).reshape(np.shape(X)[0], -1)
    y_min, y_max = Y.min(axis=0), Y.max(axis=0)
    span = y_max - y_min
    if np.any(span <= 0):
        raise InvalidArgument("cannot scale a stage whose outputs are constant")
    scale = (hi_t - lo_t) / span
    shift = lo_t - scale * y_min
    return AffineStage(evaluator, scale, shift)


def _function_stage(base: str, first: bool):
    fn = BASE_FUNCTIONS[base]
    if first:
        return lambda W, X: fn(np.asarray(X, dtype=float))[:, None]
    return lambda W, X: fn(np.hstack([W, X]))[:, None]


def _rff_stage(path: RFFSample):
    return lambda W, X: path(np.hstack([W, X]))[:, None]


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    kind: str  # "function" or "samplepath"
    control_dims: tuple[int, ...]
    box: tuple[float, float]
    base: str | None = None
    scaled: bool = True
    n_init: int = 10

    @property
    def n_stages(self) -> int:
        return len(self.control_dims)


def _registry() -> dict[str, BenchmarkSpec]:
    reg = {}
    for N in (3, 5):
        init = 10 if N == 3 else 20
        dims = (3,) + (2,) * (N - 1)
        reg[f"rosenbrock-{N}"] = BenchmarkSpec(
            f"rosenbrock-{N}", "function", dims, (-2.0, 2.0), "rosenbrock", True, init)
        reg[f"samplepath-{N}"] = BenchmarkSpec(
            f"samplepath-{N}", "samplepath", (2,) * N, (-10.0, 10.0), None, False, init)
    for scaled in (True, False):
        suffix = "" if scaled else "-unscaled"
        reg[f"sphere-3{suffix}"] = BenchmarkSpec(
            f"sphere-3{suffix}", "function", (3, 2, 2), (-5.12, 5.12), "sphere", scaled, 10)
        reg[f"matyas-3{suffix}"] = BenchmarkSpec(
            f"matyas-3{suffix}", "function", (2, 1, 1), (-10.0, 10.0), "matyas", scaled, 10)
    return dict(sorted(reg.items()))


REGISTRY: dict[str, BenchmarkSpec] = _registry()


def get_benchmark(name: str) -> BenchmarkSpec:
    if name not in REGISTRY:
        raise InvalidArgument(f"unknown benchmark {name!r}; choose from {', '.join(REGISTRY)}")
    return REGISTRY[name]


@dataclass(frozen=True, eq=False)
class BenchmarkInstance:
    """A concrete cascade plus the side information methods may need."""

    spec: BenchmarkSpec
    cascade: CascadeSpec
    output_ranges: tuple[tuple[np.ndarray, np.ndarray], ...]
    seed: int = 0
    true_kernels: tuple[KernelSpec, ...] | None = None
    paths: tuple[RFFSample, ...] = field(default=())

    @property
    def name(self) -> str:
        return self.spec.name


def _stage_box(spec: BenchmarkSpec, n: int):
    d = spec.control_dims[n - 1]
    return np.full(d, spec.box[0]), np.full(d, spec.box[1])


def _probe_inputs(rng, n_samples, w_range, lo, hi):
    X = lo + rng.random((n_samples, lo.size)) * (hi - lo)
    if w_range is None:
        return np.zeros((n_samples, 0)), X
    wlo, whi = w_range
    W = wlo + rng.random((n_samples, wlo.size)) * (whi - wlo)
    return W, X


def _build_function(spec: BenchmarkSpec, n_samples: int) -> BenchmarkInstance:
    N = spec.n_stages
    rng = np.random.default_rng(np.random.SeedSequence([0x5CA1E, N, sum(map(ord, spec.name))]))
    target = (np.array([spec.box[0]]), np.array([spec.box[1]]))
    stages, ranges = [], []
    w_range = None
    for n in range(1, N + 1):
        lo, hi = _stage_box(spec, n)
        ev = _function_stage(spec.base, n == 1)
        W, X = _probe_inputs(rng, n_samples, w_range, lo, hi)
        if spec.scaled:
            ev = scale_stage(ev, target, W, X)
            out_range = target
        else:
            Y = ev(W, X)
            out_range = (Y.min(axis=0), Y.max(axis=0))
        stages.append(StageSpec(n, lo, hi, 1, ev, prev_dim=0 if n == 1 else 1))
        ranges.append(out_range)
        w_range = out_range
    cascade = CascadeSpec(tuple(stages), name=spec.name)
    return BenchmarkInstance(spec, cascade, tuple(ranges[:-1]))


def samplepath_kernel(prev_dim: int, control_dim: int) -> KernelSpec:
    return KernelSpec.isotropic(prev_dim, control_dim, SAMPLEPATH_LENGTHSCALE, SAMPLEPATH_AMPLITUDE)


def sample_path_cascade(n_stages: int, seed: int = 0, n_features: int = SAMPLEPATH_FEATURES,
                        control_dim: int = 2, box=(-10.0, 10.0), n_samples: int = SAMPLEPATH_RANGE_SAMPLES,
                        name: str | None = None) -> BenchmarkInstance:
    """Cascade whose stages are independent GP-prior sample paths."""
    spec = BenchmarkSpec(name or f"samplepath-{n_stages}", "samplepath", (control_dim,) * n_stages,
                         tuple(box), None, False, 10 if n_stages <= 3 else 20)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B]))
    stages, ranges, kernels, paths = [], [], [], []
    w_range = None
    for n in range(1, n_stages + 1):
        prev = 0 if n == 1 else 1
        kern = samplepath_kernel(prev, control_dim)
        path_seed = int(np.random.SeedSequence([seed, n]).generate_state(1)[0])
        path = sample_path(kern, n_features, seed=path_seed)
        lo, hi = _stage_box(spec, n)
        ev = _rff_stage(path)
        W, X = _probe_inputs(rng, n_samples, w_range, lo, hi)
        Y = ev(W, X)
        out_range = (Y.min(axis=0), Y.max(axis=0))
        stages.append(StageSpec(n, lo, hi, 1, ev, prev_dim=prev))
        ranges.append(out_range)
        kernels.append(kern)
        paths.append(path)
        w_range = out_range
    cascade = CascadeSpec(tuple(stages), name=spec.name)
    return BenchmarkInstance(spec, cascade, tuple(ranges[:-1]), seed, tuple(kernels), tuple(paths))


def build_benchmark(name: str, seed: int = 0, n_samples: int = SCALING_SAMPLES) -> BenchmarkInstance:
    spec = get_benchmark(name)
    if spec.kind == "samplepath":
        return sample_path_cascade(spec.n_stages, seed, name=spec.name,
                                   n_samples=min(n_samples, SAMPLEPATH_RANGE_SAMPLES))
    return _build_function(spec, n_samples)


def build_cascade(name: str, seed: int = 0) -> CascadeSpec:
    return build_benchmark(name, seed).cascade


_OPTIMUM_CACHE: dict = {}


def true_optimum(bench: BenchmarkInstance, budget: OptBudget | None = None, seed: int = 0):
    """Best value of ``F`` found by a large multistart search, with its controls."""
    budget = budget or OptBudget(n_space_filling=10_000, n_top=20, max_evals=50_000, seed=seed)
    key = (bench.name, bench.seed, budget)
    if key not in _OPTIMUM_CACHE:
        lo, hi = bench.cascade.joint_box()
        res = MultiStartMaximizer(budget).maximize(cascade_objective(bench.cascade), lo, hi)
        _OPTIMUM_CACHE[key] = (res.value, bench.cascade.split_controls(res.x))
    value, controls = _OPTIMUM_CACHE[key]
    return value, [c.copy() for c in controls]
