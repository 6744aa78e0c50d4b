"""Credible-interval acquisition for cascades.

The interval for the final output is built stage by stage: the mean is
pushed through the stage posteriors, and the width of every stage adds the
Lipschitz-weighted width of the stage before it::

    mu~(m)  = mu(m)(mu~(m-1), x(m))
    sig~(m) = sig(m)(mu~(m-1), x(m)) + L_f * sum_s sig~_s(m-1)

Everything here is batched over candidate controls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cascade import CascadeModel
from .errors import InvalidArgument, Unsupported
from .gp import KernelSpec


@dataclass(frozen=True)
class CIParams:
    beta_sqrt: float = 2.0
    lipschitz: float = 1.0
    eta_scale: float = 1e-4

    def __post_init__(self):
        if self.beta_sqrt < 0 or not self.lipschitz > 0 or not self.eta_scale > 0:
            raise InvalidArgument("CI parameters must be positive")

    def eta(self, t: int) -> float:
        if t < 1:
            raise InvalidArgument("iteration index t starts at 1")
        return self.eta_scale / (1.0 + math.log(t))


@dataclass(frozen=True, eq=False)
class CIBounds:
    """Per-stage propagated means and widths plus the final interval."""

    mu: tuple[np.ndarray, ...]
    sigma: tuple[np.ndarray, ...]
    lcb: np.ndarray
    ucb: np.ndarray


def ci_recursion(model: CascadeModel, n: int, y_prev, controls, params: CIParams,
                 last: int | None = None) -> CIBounds:
    """Propagate the interval from stage ``n`` to stage ``last`` (default N).

    ``controls`` is (B, D^(n) + ... + D^(last)) or a list of per-stage blocks;
    ``y_prev`` is the stage-``n`` input, shared or per row.
    """
    N = model.n_stages
    last = N if last is None else last
    if not 1 <= n <= last <= N:
        raise InvalidArgument(f"invalid stage range {n}..{last}")
    spec = model.spec
    if isinstance(controls, (list, tuple)):
        blocks = [np.atleast_2d(np.asarray(c, dtype=float)) for c in controls]
    else:
        flat = np.atleast_2d(np.asarray(controls, dtype=float))
        dims = spec.control_dims[n - 1:last]
        if flat.shape[1] != sum(dims):
            raise InvalidArgument(f"expected {sum(dims)} control coordinates, got {flat.shape[1]}")
        blocks = np.split(flat, np.cumsum(dims)[:-1], axis=1)
    if len(blocks) != last - n + 1:
        raise InvalidArgument("wrong number of control blocks")
    B = blocks[0].shape[0]
    prev_dim = spec.stage(n).prev_dim
    y_prev = np.asarray(y_prev, dtype=float)
    if y_prev.size not in (prev_dim, B * prev_dim):
        raise InvalidArgument(f"stage {n} input must have dimension {prev_dim}")
    W = np.broadcast_to(y_prev.reshape(-1, prev_dim), (B, prev_dim)) if prev_dim else np.zeros((B, 0))

    mus, sigmas = [], []
    mean, std = model.predict(n, W, blocks[0])
    sig = np.repeat(std[:, None], mean.shape[1], axis=1)
    mus.append(mean)
    sigmas.append(sig)
    for k, m in enumerate(range(n + 1, last + 1), start=1):
        mean, std = model.predict(m, mean, blocks[k])
        spread = params.lipschitz * sig.sum(axis=1)
        sig = np.repeat((std + spread)[:, None], mean.shape[1], axis=1)
        mus.append(mean)
        sigmas.append(sig)
    mu_last, sig_last = mus[-1][:, 0], sigmas[-1][:, 0]
    return CIBounds(tuple(mus), tuple(sigmas),
                    mu_last - params.beta_sqrt * sig_last, mu_last + params.beta_sqrt * sig_last)


def final_mu_sigma(model: CascadeModel, n: int, y_prev, controls, params: CIParams):
    b = ci_recursion(model, n, y_prev, controls, params)
    return b.mu[-1][:, 0], b.sigma[-1][:, 0]


def lcb_ucb(model: CascadeModel, n: int, y_prev, controls, params: CIParams):
    """Lower and upper confidence bounds of ``F`` for each control row."""
    b = ci_recursion(model, n, y_prev, controls, params)
    return b.lcb, b.ucb


def cucb(model: CascadeModel, controls, params: CIParams) -> np.ndarray:
    """Upper confidence bound of the full chain started from stage 1."""
    return ci_recursion(model, 1, np.zeros(0), controls, params).ucb


def _tail_max(model, n, y_prev, x_n, params, optimizer, which, seed):
    """Maximize a bound over ``x^(n+1..N)`` with ``x^(n)`` fixed."""
    spec = model.spec
    x_n = np.asarray(x_n, dtype=float).ravel()
    N = model.n_stages

    def score(P):
        full = np.hstack([np.broadcast_to(x_n, (P.shape[0], x_n.size)), P])
        b = ci_recursion(model, n, y_prev, full, params)
        if which == "ucb":
            return b.ucb
        if which == "lcb":
            return b.lcb
        return b.sigma[-1][:, 0]

    if n == N:
        return float(score(np.zeros((1, 0)))[0]), np.zeros(0)
    lo, hi = spec.joint_box(n + 1)
    res = optimizer.maximize(score, lo, hi, seed=seed)
    return res.value, res.x


def pessimistic_argmax(model: CascadeModel, params: CIParams, optimizer, n: int = 1,
                       y_prev=None, seed=None):
    """``max`` of the LCB over ``x^(n..N)`` given the stage-``n`` input; returns (value, x)."""
    y_prev = np.zeros(model.spec.stage(n).prev_dim) if y_prev is None else y_prev
    lo, hi = model.spec.joint_box(n)
    res = optimizer.maximize(lambda P: ci_recursion(model, n, y_prev, P, params).lcb, lo, hi, seed=seed)
    return res.value, res.x


def optimistic_argmax(model: CascadeModel, params: CIParams, optimizer, n: int = 1,
                      y_prev=None, seed=None):
    y_prev = np.zeros(model.spec.stage(n).prev_dim) if y_prev is None else y_prev
    lo, hi = model.spec.joint_box(n)
    res = optimizer.maximize(lambda P: ci_recursion(model, n, y_prev, P, params).ucb, lo, hi, seed=seed)
    return res.value, res.x


def q_t(model: CascadeModel, params: CIParams, optimizer, seed=None) -> float:
    """Pessimistic estimate of the optimum when starting from stage 1."""
    return pessimistic_argmax(model, params, optimizer, seed=seed)[0]


def lcb_given_y(model: CascadeModel, y_prev, n: int, params: CIParams, optimizer, seed=None) -> float:
    return pessimistic_argmax(model, params, optimizer, n=n, y_prev=y_prev, seed=seed)[0]


def ucb_given_xy(model: CascadeModel, x_n, y_prev, n: int, params: CIParams, optimizer, seed=None) -> float:
    return _tail_max(model, n, y_prev, x_n, params, optimizer, "ucb", seed)[0]


def max_uncertainty(model: CascadeModel, x_n, y_prev, n: int, params: CIParams, optimizer, seed=None) -> float:
    return _tail_max(model, n, y_prev, x_n, params, optimizer, "sigma", seed)[0]


def ci_af_value(model: CascadeModel, x_n, y_prev, n: int, t: int, params: CIParams, optimizer,
                q: float = -np.inf, baseline: float | None = None, seed=None) -> float:
    """``c = max(a, eta_t * b)`` at one ``x^(n)``, computed with nested maximizations.

    This is the literal definition; ``ci_select`` solves the same problem in a
    single joint maximization.
    """
    if baseline is None:
        baseline = max(lcb_given_y(model, y_prev, n, params, optimizer, seed=seed), q)
    a = ucb_given_xy(model, x_n, y_prev, n, params, optimizer, seed=seed) - baseline
    b = max_uncertainty(model, x_n, y_prev, n, params, optimizer, seed=seed)
    return max(a, params.eta(t) * b)


def ci_select(model: CascadeModel, y_prev, n: int, t: int, params: CIParams, optimizer,
              q: float = -np.inf, nested_optimizer=None, seed=None):
    """Choose ``x^(n)`` maximizing the CI-based acquisition.

    Since ``max_tail max(A, B) = max(max_tail A, max_tail B)``, maximizing
    ``g = max(UCB - baseline, eta * sig~)`` jointly over ``x^(n..N)`` and keeping
    the stage-``n`` block gives the argmax of ``c`` exactly.  Only the
    baseline ``max(LCB(y), Q)`` needs a separate maximization.

    Returns ``(x_n, value)``.
    """
    nested = optimizer if nested_optimizer is None else nested_optimizer
    baseline = max(lcb_given_y(model, y_prev, n, params, nested, seed=seed), q)
    eta = params.eta(t)

    def g(P):
        b = ci_recursion(model, n, y_prev, P, params)
        return np.maximum(b.ucb - baseline, eta * b.sigma[-1][:, 0])

    lo, hi = model.spec.joint_box(n)
    res = optimizer.maximize(g, lo, hi, seed=seed)
    return model.spec.split_controls(res.x, first=n)[0], res.value


def estimate_lf(f, lower, upper, n_probes: int = 1000, seed=0, rel_step: float = 1e-4,
                coords=None) -> float:
    """Largest 1-norm of a finite-difference gradient over random probes.

    ``f`` is batched, (B, d) -> (B,) or (B, M); for vector outputs the largest
    component norm is returned.  ``coords`` restricts the gradient to a subset
    of input coordinates.
    """
    if n_probes < 1:
        raise InvalidArgument("need at least one probe")
    lo = np.asarray(lower, dtype=float).ravel()
    hi = np.asarray(upper, dtype=float).ravel()
    d = lo.size
    rng = np.random.default_rng(seed)
    P = lo + rng.random((n_probes, d)) * (hi - lo)
    coords = np.arange(d) if coords is None else np.asarray(coords, dtype=int)
    h = rel_step * (hi - lo)
    total = None
    for i in coords:
        up, dn = P.copy(), P.copy()
        up[:, i] = np.minimum(P[:, i] + h[i], hi[i])
        dn[:, i] = np.maximum(P[:, i] - h[i], lo[i])
        span = (up[:, i] - dn[:, i])[:, None]
        fu = np.asarray(f(up), dtype=float).reshape(n_probes, -1)
        fd = np.asarray(f(dn), dtype=float).reshape(n_probes, -1)
        g = np.abs(fu - fd) / np.where(span > 0, span, np.inf)
        total = g if total is None else total + g
    if total is None:
        return 0.0
    return float(np.max(total))


def sigma_lipschitz_constant(kind: str, a: float, rho: float = 1.0, nu: float | None = None) -> float:
    """Lipschitz constant (1-norm) of the posterior standard deviation.

    ``a`` and ``rho`` are the kernel scale and lengthscale in the form
    ``a^2 * g(||x - y|| / rho)``.
    """
    if not a > 0 or not rho > 0:
        raise InvalidArgument("a and rho must be positive")
    if kind == "linear":
        return float(a)
    if kind == "gaussian":
        return math.sqrt(2.0) * a / rho
    if kind == "matern":
        if nu is None or not nu > 1:
            raise Unsupported("the posterior std of a Matern kernel is Lipschitz only for nu > 1")
        return math.sqrt(2.0) * a / rho * math.sqrt(nu / (nu - 1.0))
    raise Unsupported(f"no Lipschitz constant known for kernel kind {kind!r}")


def sigma_lipschitz_bound(kernel: KernelSpec) -> float:
    """Kernel-table constant for a fitted kernel.

    ``KernelSpec.amplitude`` is the prior variance, so ``a = sqrt(amplitude)``;
    with ARD lengthscales the shortest one is used, which gives a valid bound.
    """
    a = math.sqrt(kernel.amplitude)
    rho = float(np.min(kernel.lengthscales))
    return sigma_lipschitz_constant(kernel.kind, a, rho, kernel.nu)


@dataclass(frozen=True)
class StoppingConstants:
    c0: float
    c1: float
    c2: float
    c3: float
    c4: float
    l_sigma: float
    overflow: bool = False


def _checked(fn) -> tuple[float, bool]:
    try:
        v = float(fn())
    except OverflowError:
        return math.inf, True
    return v, math.isinf(v)


def stopping_constants(n_stages: int, lipschitz: float, l_sigma: float, beta_sqrt: float) -> StoppingConstants:
    """Constants of the finite-iteration stopping guarantee; overflow yields inf and a flag."""
    if n_stages < 1 or not lipschitz > 0 or not l_sigma > 0 or not beta_sqrt > 0:
        raise InvalidArgument("all inputs must be positive")
    N = n_stages
    c0 = l_sigma * beta_sqrt + lipschitz + 1.0
    c1 = max(1.0, lipschitz, 1.0 / lipschitz)
    c2, o2 = _checked(lambda: 4.0 * N * N * c0 ** (2 * N - 3) * c1 ** N)
    c3, o3 = _checked(lambda: N * c2 ** N)
    c4, o4 = _checked(lambda: (2.0 * beta_sqrt + 2.0) ** N * c3 ** N)
    return StoppingConstants(c0, c1, c2, c3, c4, l_sigma, overflow=o2 or o3 or o4)


def stopping_bound(consts: StoppingConstants, n_stages: int, t: int, gamma_t: float,
                   beta_sqrt: float, noise: float = 1e-4, eta_scale: float = 1.0) -> float:
    """Left side of the sufficient condition ``bound < xi^2`` for stopping after ``t`` steps."""
    if t < 1:
        raise InvalidArgument("t must be positive")
    beta = beta_sqrt ** 2
    eta = eta_scale / (1.0 + math.log(t))
    N = n_stages
    num = 8.0 * beta * consts.c4 ** 2 * N ** 3
    val, _ = _checked(lambda: num / math.log1p(1.0 / noise) * gamma_t * eta ** (-2 * N - 2) / t)
    return val
