"""Comparison methods: random search, fully black-box BO and CBO."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .acq_ei import ei_scalar
from .cascade import CascadeModel
from .errors import InvalidArgument
from .gp import GPPosterior

FB_UCB_BETA_SQRT = 2.0
CBO_VAR_FLOOR = 1e-12


def random_select(boxes: Sequence[tuple[np.ndarray, np.ndarray]], seed=0) -> list[np.ndarray]:
    """Uniform draw of every stage control; ``seed`` may be a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for lo, hi in boxes:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        out.append(lo + rng.random(lo.shape) * (hi - lo))
    return out


def fb_acquisition(gp: GPPosterior, mode: str, f_best: float) -> Callable[[np.ndarray], np.ndarray]:
    if mode not in ("ei", "ucb"):
        raise InvalidArgument(f"unknown fully black-box mode {mode!r}")

    def acq(P):
        mean, var = gp.predict(P)
        std = np.sqrt(var)
        if mode == "ei":
            return ei_scalar(mean[:, 0], std, f_best)
        return mean[:, 0] + FB_UCB_BETA_SQRT * std
    return acq


def fb_select(gp: GPPosterior, mode: str, f_best: float, lower, upper, optimizer, seed=None) -> np.ndarray:
    """Maximize EI or ``mu + 2 sigma`` of a GP over the concatenated controls."""
    return optimizer.maximize(fb_acquisition(gp, mode, f_best), lower, upper, seed=seed).x


@dataclass(frozen=True)
class CboParams:
    kappa1: float = 1.0
    kappa2: float = 1.0
    widen: float = 2.0
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not self.kappa1 > 0 or not self.kappa2 > 0 or not self.widen > 0:
            raise InvalidArgument("CBO parameters must be positive")


def widened_range(lower, upper, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Interval ``factor`` times as wide, about the same centre."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return c - factor * h, c + factor * h


def cbo_expected_improvement(mean, std, f_best):
    """EI in the form ``sigma * (Z Phi(Z) + phi(Z))`` with ``Z = 0`` where ``sigma = 0``."""
    safe = std > 0
    z = np.where(safe, (mean - f_best) / np.where(safe, std, 1.0), 0.0)
    return std * (z * special.ndtr(z) + np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi))


def cbo_matching_loss(mean, var, target, params: CboParams):
    """``(m - y)^T (k1 S^-1 + k2 S) (m - y)`` with diagonal ``S``, batched over rows."""
    v = np.maximum(np.broadcast_to(np.asarray(var, dtype=float)[:, None], mean.shape), 0.0)
    v = np.where(v > 0, v, CBO_VAR_FLOOR)
    r2 = (mean - np.asarray(target, dtype=float)) ** 2
    return np.sum((params.kappa1 / v + params.kappa2 * v) * r2, axis=1)


def cbo_select(model: CascadeModel, params: CboParams, f_best: float, optimizer,
               output_ranges: Sequence[tuple[np.ndarray, np.ndarray]], seed=None):
    """Choose controls backwards from the final stage by output matching.

    ``output_ranges[n - 1]`` is the true range of the stage-``n`` output for
    ``n = 1..N-1``; the search over desired outputs uses its widened version.
    Returns ``(controls, desired)`` where ``desired[n - 1]`` is the target
    output of stage ``n``.  No stage is evaluated here.
    """
    spec = model.spec
    N = model.n_stages
    if len(output_ranges) < N - 1:
        raise InvalidArgument("an output range is needed for every non-final stage")
    controls: list[np.ndarray] = [None] * N
    desired: list[np.ndarray] = [None] * (N - 1)

    def input_box(n):
        st = spec.stage(n)
        if n == 1:
            return st.lower, st.upper
        wlo, whi = widened_range(*output_ranges[n - 2], params.widen)
        return np.concatenate([np.ravel(wlo), st.lower]), np.concatenate([np.ravel(whi), st.upper])

    gpN = model.posterior(N)

    def final_score(P):
        mean, var = gpN.predict(P)
        return cbo_expected_improvement(mean[:, 0], np.sqrt(var), f_best)

    lo, hi = input_box(N)
    best = optimizer.maximize(final_score, lo, hi, seed=seed).x
    pd = spec.stage(N).prev_dim
    controls[N - 1] = best[pd:]
    if N > 1:
        desired[N - 2] = best[:pd]

    for n in range(N - 1, 0, -1):
        gp = model.posterior(n)
        target = desired[n - 1]
        pd = spec.stage(n).prev_dim

        def score(P, gp=gp, target=target, pd=pd):
            mean, var = gp.predict(P)
            loss = cbo_matching_loss(mean, var, target, params)
            if params.cost is not None:
                loss = loss + np.asarray(params.cost(P[:, :pd], P[:, pd:]), dtype=float)
            return -loss

        lo, hi = input_box(n)
        best = optimizer.maximize(score, lo, hi, seed=seed).x
        controls[n - 1] = best[pd:]
        if n > 1:
            desired[n - 2] = best[:pd]
    return controls, desired
