"""Cascade processes, observation logs and per-stage surrogate bundles.

Stages are numbered from 1 to N.  Stage ``n`` maps ``(w, x)`` to ``y`` where
``w`` is the output of stage ``n - 1`` (the empty vector for stage 1) and
``x`` lies in the stage control box.  All evaluators are batched: they take
``W`` of shape (B, prev_dim) and ``X`` of shape (B, D) and return (B, M).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EvaluatorFailure, InvalidArgument
from .gp import GPPosterior, StageDataset

BatchEvaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]

# tolerance for "inside the box" checks on controls coming back from optimizers
BOX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class StageSpec:
    index: int
    lower: np.ndarray
    upper: np.ndarray
    output_dim: int
    evaluator: BatchEvaluator
    prev_dim: int = 0

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise InvalidArgument(f"stage {self.index}: malformed control box")
        if np.any(lo > hi):
            raise InvalidArgument(f"stage {self.index}: lower bound exceeds upper bound")
        if self.output_dim < 1:
            raise InvalidArgument(f"stage {self.index}: output_dim must be positive")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def control_dim(self) -> int:
        return self.lower.size

    def contains(self, x: np.ndarray) -> bool:
        x = np.atleast_2d(x)
        width = np.maximum(self.upper - self.lower, 1.0)
        return bool(np.all(x >= self.lower - BOX_TOL * width) and np.all(x <= self.upper + BOX_TOL * width))


@dataclass(frozen=True, eq=False)
class CascadeSpec:
    stages: tuple[StageSpec, ...]
    name: str = "cascade"

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise InvalidArgument("a cascade needs at least one stage")
        for i, st in enumerate(stages, start=1):
            if st.index != i:
                raise InvalidArgument(f"stage at position {i} carries index {st.index}")
        if stages[0].prev_dim != 0:
            raise InvalidArgument("stage 1 must not take a previous output")
        for prev, cur in zip(stages, stages[1:]):
            if cur.prev_dim != prev.output_dim:
                raise InvalidArgument(
                    f"stage {cur.index} expects a {cur.prev_dim}-dim input but stage {prev.index} "
                    f"produces {prev.output_dim}")
        if stages[-1].output_dim != 1:
            raise InvalidArgument("the final stage must have a scalar output")
        object.__setattr__(self, "stages", stages)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage(self, n: int) -> StageSpec:
        if not 1 <= n <= self.n_stages:
            raise InvalidArgument(f"stage index {n} outside 1..{self.n_stages}")
        return self.stages[n - 1]

    @property
    def control_dims(self) -> tuple[int, ...]:
        return tuple(st.control_dim for st in self.stages)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return tuple(st.output_dim for st in self.stages)

    def joint_box(self, first: int = 1, last: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated control box of stages ``first..last``."""
        last = self.n_stages if last is None else last
        sts = self.stages[first - 1:last]
        if not sts:
            return np.zeros(0), np.zeros(0)
        return (np.concatenate([s.lower for s in sts]), np.concatenate([s.upper for s in sts]))

    def split_controls(self, flat, first: int = 1) -> list[np.ndarray]:
        """Split a (B, sum D) array into per-stage blocks starting at ``first``."""
        flat = np.asarray(flat, dtype=float)
        squeeze = flat.ndim == 1
        flat = np.atleast_2d(flat)
        dims = self.control_dims[first - 1:]
        if flat.shape[1] != sum(dims):
            raise InvalidArgument(f"expected {sum(dims)} control coordinates, got {flat.shape[1]}")
        cuts = np.cumsum(dims)[:-1]
        parts = np.split(flat, cuts, axis=1)
        return [p[0] for p in parts] if squeeze else parts


def eval_stage_batch(spec: CascadeSpec, n: int, W, X) -> np.ndarray:
    st = spec.stage(n)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    W = np.asarray(W, dtype=float).reshape(B, st.prev_dim)
    if X.shape[1] != st.control_dim:
        raise InvalidArgument(f"stage {n}: control has dim {X.shape[1]}, expected {st.control_dim}")
    if not st.contains(X):
        raise InvalidArgument(f"stage {n}: control outside its box")
    try:
        Y = np.asarray(st.evaluator(W, X), dtype=float).reshape(B, st.output_dim)
    except (InvalidArgument, EvaluatorFailure):
        raise
    except Exception as exc:  # evaluator is a black box
        raise EvaluatorFailure(f"evaluator raised {exc!r}", stage=n) from exc
    if not np.all(np.isfinite(Y)):
        raise EvaluatorFailure("non-finite output", stage=n)
    return Y


def eval_stage(spec: CascadeSpec, n: int, w, x) -> np.ndarray:
    """Evaluate one stage at a single point, returning a vector of length M^(n)."""
    st = spec.stage(n)
    w = np.asarray(w, dtype=float).reshape(1, st.prev_dim)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return eval_stage_batch(spec, n, w, x)[0]


def eval_cascade_batch(spec: CascadeSpec, controls: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Run a batch of control tuples through every stage; returns all stage outputs."""
    if len(controls) != spec.n_stages:
        raise InvalidArgument(f"expected {spec.n_stages} control blocks, got {len(controls)}")
    B = np.atleast_2d(controls[0]).shape[0]
    w = np.zeros((B, 0))
    outs = []
    for n, x in enumerate(controls, start=1):
        w = eval_stage_batch(spec, n, w, x)
        outs.append(w)
    return outs


def eval_cascade(spec: CascadeSpec, controls: Sequence) -> tuple[float, list[np.ndarray]]:
    """``F(x^(1..N))`` together with the intermediate outputs ``y^(1..N-1)``."""
    outs = eval_cascade_batch(spec, [np.asarray(c, dtype=float).reshape(1, -1) for c in controls])
    return float(outs[-1][0, 0]), [o[0] for o in outs[:-1]]


def cascade_objective(spec: CascadeSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Batched ``F`` over flat concatenated controls."""
    def f(flat: np.ndarray) -> np.ndarray:
        return eval_cascade_batch(spec, spec.split_controls(np.atleast_2d(flat)))[-1][:, 0]
    return f


@dataclass(frozen=True)
class EvalRecord:
    t: int
    stage: int
    w: np.ndarray
    x: np.ndarray
    y: np.ndarray
    stamp: float = field(default_factory=time.time, compare=False)


@dataclass(frozen=True, eq=False)
class ObservationLog:
    datasets: tuple[StageDataset, ...]
    t: int = 0

    @classmethod
    def empty(cls, spec: CascadeSpec) -> "ObservationLog":
        return cls(tuple(StageDataset.empty(st.prev_dim, st.control_dim, st.output_dim)
                         for st in spec.stages))

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(d.n for d in self.datasets)

    def dataset(self, n: int) -> StageDataset:
        return self.datasets[n - 1]


def append_observation(log: ObservationLog, record: EvalRecord) -> ObservationLog:
    n = record.stage
    if not 1 <= n <= len(log.datasets):
        raise InvalidArgument(f"record stage {n} outside 1..{len(log.datasets)}")
    ds = log.datasets[n - 1]
    dw, dx, dy = ds.dims
    if np.size(record.w) != dw or np.size(record.x) != dx or np.size(record.y) != dy:
        raise InvalidArgument(f"record dims do not match stage {n}")
    datasets = list(log.datasets)
    datasets[n - 1] = ds.append(record.w, record.x, record.y)
    return ObservationLog(tuple(datasets), t=max(log.t, record.t))


@dataclass(frozen=True, eq=False)
class CascadeModel:
    """Fitted stage posteriors together with the control boxes they live on.

    This is the read-only object consumed by all acquisition functions.
    """

    spec: CascadeSpec
    posteriors: tuple[GPPosterior, ...]

    def __post_init__(self):
        posts = tuple(self.posteriors)
        if len(posts) != self.spec.n_stages:
            raise InvalidArgument("need exactly one posterior per stage")
        for st, gp in zip(self.spec.stages, posts):
            if gp.input_dim != st.prev_dim + st.control_dim or gp.output_dim != st.output_dim:
                raise InvalidArgument(f"posterior of stage {st.index} has mismatched dimensions")
        object.__setattr__(self, "posteriors", posts)

    @property
    def n_stages(self) -> int:
        return self.spec.n_stages

    def posterior(self, n: int) -> GPPosterior:
        return self.posteriors[n - 1]

    def predict(self, n: int, W, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean (B, M) and standard deviation (B,) of stage ``n``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W = np.asarray(W, dtype=float).reshape(X.shape[0], -1)
        mean, var = self.posteriors[n - 1].predict(np.hstack([W, X]))
        return mean, np.sqrt(var)
