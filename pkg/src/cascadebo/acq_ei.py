"""Expected-improvement acquisition for cascades.

The final stage uses closed-form EI.  Earlier stages push fixed standard
normal base samples through the middle-stage posteriors
(``y_s = mu + sigma * omega_s``) and average the closed-form EI of the final
stage over the resulting samples.  With the base samples pinned the utility
is a deterministic, smooth function of the controls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .cascade import CascadeModel
from .errors import InvalidArgument

SIGMA_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
# rows per posterior query inside u_tilde (candidates x samples)
_CHUNK_ROWS = 1 << 17


def ei_scalar(mu, sigma, f_best):
    """Closed-form ``E[(Y - f_best)^+]`` for ``Y ~ N(mu, sigma^2)``; vectorized."""
    mu, sigma, f_best = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, f_best)))
    if np.any(sigma < 0):
        raise InvalidArgument("sigma must be nonnegative")
    diff = mu - f_best
    safe = sigma >= SIGMA_FLOOR
    s = np.where(safe, sigma, 1.0)
    z = diff / s
    val = s * _INV_SQRT_2PI * np.exp(-0.5 * z * z) + diff * special.ndtr(z)
    out = np.where(safe, np.maximum(val, 0.0), np.maximum(diff, 0.0))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class BaseSamples:
    """Standard-normal draws per stage, indexed by stage number."""

    draws: dict
    seed: int | None = None

    @classmethod
    def draw(cls, output_dims, n_samples: int, seed=0) -> "BaseSamples":
        if n_samples < 1:
            raise InvalidArgument("need at least one base sample")
        rng = np.random.default_rng(seed)
        draws = {}
        for n, m in enumerate(output_dims, start=1):
            arr = rng.standard_normal((n_samples, m))
            arr.setflags(write=False)
            draws[n] = arr
        return cls(draws, seed if isinstance(seed, int) else None)

    @property
    def n_samples(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    def stage(self, n: int) -> np.ndarray:
        return self.draws[n]


@dataclass(frozen=True, eq=False)
class EIContext:
    model: CascadeModel
    f_best: float
    base_samples: BaseSamples

    @property
    def n_samples(self) -> int:
        return self.base_samples.n_samples


def _split_tail(ctx: EIContext, n: int, controls) -> list[np.ndarray]:
    return ctx.model.spec.split_controls(np.atleast_2d(np.asarray(controls, dtype=float)), first=n)


def u_tilde_batch(ctx: EIContext, n: int, y_prev, controls) -> np.ndarray:
    """Monte-Carlo EI utility for B candidate tails.

    ``y_prev`` has shape (M^(n-1),) or (B, M^(n-1)); ``controls`` has shape
    (B, D^(n) + ... + D^(N)).  Returns shape (B,).
    """
    model = ctx.model
    N = model.n_stages
    blocks = _split_tail(ctx, n, controls)
    B = blocks[0].shape[0]
    prev_dim = model.spec.stage(n).prev_dim
    W = np.broadcast_to(np.asarray(y_prev, dtype=float).reshape(-1, prev_dim), (B, prev_dim)) \
        if prev_dim else np.zeros((B, 0))
    if n == N:
        mean, std = model.predict(N, W, blocks[0])
        return ei_scalar(mean[:, 0], std, ctx.f_best)

    S = ctx.n_samples
    step = max(1, _CHUNK_ROWS // S)
    out = np.empty(B)
    for lo in range(0, B, step):
        hi = min(B, lo + step)
        b = hi - lo
        mean, std = model.predict(n, W[lo:hi], blocks[0][lo:hi])
        # (b, S, M) samples of the stage-n output
        y = mean[:, None, :] + std[:, None, None] * ctx.base_samples.stage(n)[None, :, :]
        for k, m in enumerate(range(n + 1, N + 1), start=1):
            x_rep = np.repeat(blocks[k][lo:hi], S, axis=0)
            mean, std = model.predict(m, y.reshape(b * S, -1), x_rep)
            if m == N:
                ei = ei_scalar(mean[:, 0], std, ctx.f_best).reshape(b, S)
                out[lo:hi] = ei.mean(axis=1)
            else:
                y = (mean + std[:, None] * np.tile(ctx.base_samples.stage(m), (b, 1))).reshape(b, S, -1)
    return out


def u_tilde(ctx: EIContext, n: int, y_prev, controls) -> float:
    """Utility of a single control tail ``x^(n..N)`` given the stage-``n`` input."""
    flat = np.concatenate([np.asarray(c, dtype=float).ravel() for c in controls]) \
        if isinstance(controls, (list, tuple)) else np.asarray(controls, dtype=float).ravel()
    return float(u_tilde_batch(ctx, n, y_prev, flat[None, :])[0])


def maximize_ei(ctx: EIContext, y_prev, n: int, optimizer, seed=None):
    """Jointly maximize the utility over ``x^(n..N)``.

    Returns ``(x_n, tail, value)`` where ``tail`` lists the remaining stage
    controls of the maximizer.
    """
    spec = ctx.model.spec
    lo, hi = spec.joint_box(n)
    res = optimizer.maximize(lambda P: u_tilde_batch(ctx, n, y_prev, P), lo, hi, seed=seed)
    parts = spec.split_controls(res.x, first=n)
    return parts[0], parts[1:], res.value
