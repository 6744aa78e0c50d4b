"""Bound-constrained maximization of batched acquisition surfaces.

The recipe: score a Latin-hypercube design, refine the best few candidates
with L-BFGS-B at a loose tolerance, then polish the winner at the default
tolerance.  Gradients come from central finite differences whose whole
stencil is evaluated as one batch.  Every evaluated point is tracked, so the
returned value can never be worse than the best design point.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .errors import InvalidArgument, OptimizerFailure

BatchObjective = Callable[[np.ndarray], np.ndarray]

FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class OptBudget:
    n_space_filling: int = 1000
    n_top: int = 5
    coarse_tol: float = 1e-3
    fine_tol: float | None = None
    max_iter: int = 200
    max_evals: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_space_filling < 1 or self.n_top < 0:
            raise InvalidArgument("budget counts must be positive")
        if self.n_top > self.n_space_filling:
            raise InvalidArgument("n_top cannot exceed n_space_filling")

    def reduced(self, n_space_filling: int = 200, n_top: int = 3) -> "OptBudget":
        """Smaller budget for maximizations nested inside another acquisition."""
        n_sf = min(n_space_filling, self.n_space_filling)
        return replace(self, n_space_filling=n_sf, n_top=min(n_top, self.n_top, n_sf))


@dataclass(frozen=True)
class OptResult:
    x: np.ndarray
    value: float
    n_evals: int
    design_value: float


def lhs_sample(lower, upper, n: int, seed=0) -> np.ndarray:
    """Latin-hypercube design with one point per stratum in every coordinate."""
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    lo = np.asarray(lower, dtype=float).ravel()
    hi = np.asarray(upper, dtype=float).ravel()
    if lo.size == 0:
        return np.zeros((n, 0))
    u = qmc.LatinHypercube(d=lo.size, seed=np.random.default_rng(seed)).random(n)
    return lo + u * (hi - lo)


class _Budget(Exception):
    pass


class _Tracker:
    """Wraps the objective: counts evaluations and remembers the best point."""

    def __init__(self, f: BatchObjective, cap: int):
        self.f = f
        self.cap = cap
        self.n = 0
        self.best_x: np.ndarray | None = None
        self.best_v = -np.inf

    def __call__(self, P: np.ndarray) -> np.ndarray:
        if self.n + P.shape[0] > self.cap:
            raise _Budget
        self.n += P.shape[0]
        v = safe_eval(self.f, P)
        i = int(np.argmax(v))
        if v[i] > self.best_v:
            self.best_v, self.best_x = float(v[i]), P[i].copy()
        return v


def safe_eval(f: BatchObjective, P: np.ndarray) -> np.ndarray:
    """Batch evaluation that maps failures and NaN to -inf, retrying pointwise."""
    try:
        v = np.asarray(f(P), dtype=float).reshape(P.shape[0])
    except Exception:
        v = np.empty(P.shape[0])
        for i in range(P.shape[0]):
            try:
                v[i] = float(np.asarray(f(P[i:i + 1]), dtype=float).ravel()[0])
            except Exception:
                v[i] = -np.inf
    return np.where(np.isnan(v), -np.inf, v)


def _fd_stencil(x, lo, hi, h):
    """Batch of points for a central difference, one-sided at the bounds."""
    d = x.size
    plus = np.tile(x, (d, 1))
    minus = np.tile(x, (d, 1))
    idx = np.arange(d)
    plus[idx, idx] = np.minimum(x + h, hi)
    minus[idx, idx] = np.maximum(x - h, lo)
    return plus, minus


def _value_and_grad(x, track: _Tracker, lo, hi, h):
    plus, minus = _fd_stencil(x, lo, hi, h)
    vals = track(np.vstack([x[None, :], plus, minus]))
    d = x.size
    f0, fp, fm = vals[0], vals[1:d + 1], vals[d + 1:]
    span = plus[np.arange(d), np.arange(d)] - minus[np.arange(d), np.arange(d)]
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(span > 0, (fp - fm) / np.where(span > 0, span, 1.0), 0.0)
    if not np.isfinite(f0):
        return 1e300, np.zeros(d)
    g = np.where(np.isfinite(g), g, 0.0)
    return -f0, -g


def _pattern_search(track: _Tracker, x, v, lo, hi, tol):
    width = hi - lo
    step = 0.1 * width
    d = x.size
    while np.any(step > tol * np.maximum(width, 1e-300)):
        moves = np.vstack([np.clip(x + np.diag(step), lo, hi), np.clip(x - np.diag(step), lo, hi)])
        vals = track(moves)
        i = int(np.argmax(vals))
        if vals[i] > v:
            x, v = moves[i], float(vals[i])
        else:
            step = step * 0.5
        if d == 0:
            break
    return x, v


def _refine(track: _Tracker, x0, lo, hi, tol, max_iter):
    width = hi - lo
    h = FD_REL_STEP * width
    bounds = list(zip(lo, hi))
    opts = {"maxiter": max_iter}
    if tol is not None:
        opts.update(ftol=tol, gtol=tol)
    res = optimize.minimize(_value_and_grad, x0, args=(track, lo, hi, h), jac=True,
                            method="L-BFGS-B", bounds=bounds, options=opts)
    x = np.clip(res.x, lo, hi)
    if res.status == 2 or "ABNORMAL" in str(res.message).upper():
        v = float(track(x[None, :])[0])
        _pattern_search(track, x, v, lo, hi, tol if tol is not None else 1e-6)
    return x


class MultiStartMaximizer:
    """Latin-hypercube screening followed by two-phase L-BFGS-B refinement."""

    def __init__(self, budget: OptBudget | None = None):
        self.budget = budget or OptBudget()

    def reduced(self) -> "MultiStartMaximizer":
        return MultiStartMaximizer(self.budget.reduced())

    def maximize(self, f: BatchObjective, lower, upper, seed=None) -> OptResult:
        b = self.budget
        lo = np.asarray(lower, dtype=float).ravel()
        hi = np.asarray(upper, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise InvalidArgument("malformed box")
        seed = b.seed if seed is None else seed
        design = lhs_sample(lo, hi, b.n_space_filling, seed)
        vals = safe_eval(f, design)
        if not np.any(np.isfinite(vals)):
            raise OptimizerFailure("objective failed on every space-filling candidate")
        order = np.argsort(-vals, kind="stable")
        best_i = int(order[0])
        design_value = float(vals[best_i])
        track = _Tracker(f, b.max_evals)
        track.best_x, track.best_v = design[best_i].copy(), design_value
        if lo.size == 0 or b.n_top == 0 or np.all(hi == lo):
            return OptResult(track.best_x, track.best_v, b.n_space_filling, design_value)

        try:
            for i in order[:b.n_top]:
                if not np.isfinite(vals[i]):
                    break
                _refine(track, design[i], lo, hi, b.coarse_tol, b.max_iter)
            _refine(track, track.best_x.copy(), lo, hi, b.fine_tol, b.max_iter)
        except _Budget:
            pass
        except (ValueError, FloatingPointError) as exc:
            warnings.warn(f"local refinement failed ({exc}); keeping the best point found",
                          RuntimeWarning, stacklevel=2)
        x = np.clip(track.best_x, lo, hi)
        return OptResult(x, track.best_v, b.n_space_filling + track.n, design_value)


class GridMaximizer:
    """Exhaustive search over a cartesian grid; returns the first argmax.

    Used for discrete toy instances where exact enumeration is the point.
    """

    def __init__(self, points_per_dim: int = 5, max_points: int = 2_000_000):
        if points_per_dim < 1:
            raise InvalidArgument("points_per_dim must be positive")
        self.points_per_dim = points_per_dim
        self.max_points = max_points

    def reduced(self) -> "GridMaximizer":
        return self

    def grid(self, lower, upper) -> np.ndarray:
        lo = np.asarray(lower, dtype=float).ravel()
        hi = np.asarray(upper, dtype=float).ravel()
        axes = [np.array([l]) if l == h else np.linspace(l, h, self.points_per_dim)
                for l, h in zip(lo, hi)]
        if not axes:
            return np.zeros((1, 0))
        size = int(np.prod([a.size for a in axes]))
        if size > self.max_points:
            raise InvalidArgument(f"grid of {size} points exceeds max_points")
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def maximize(self, f: BatchObjective, lower, upper, seed=None) -> OptResult:
        P = self.grid(lower, upper)
        vals = safe_eval(f, P)
        if not np.any(np.isfinite(vals)):
            raise OptimizerFailure("objective failed on every grid point")
        i = int(np.argmax(vals))
        return OptResult(P[i].copy(), float(vals[i]), P.shape[0], float(vals[i]))


def maximize(f: BatchObjective, lower, upper, budget: OptBudget | None = None) -> OptResult:
    return MultiStartMaximizer(budget).maximize(f, lower, upper)
