"""Dense Gaussian-process regression for cascade stages.

Every stage model maps a joint input ``p = (w, x)`` (previous-stage output
followed by the stage controls) to an ``M``-dimensional output.  The outputs
are modelled as independent GPs that share one kernel and therefore one
Cholesky factor.

The amplitude convention follows the kernel used in the experiments::

    k(p, q) = amplitude * exp(-sum_i (p_i - q_i)^2 / (2 l_i^2))

i.e. ``amplitude`` is the prior variance ``k(p, p)`` (it is *not* squared).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla
from scipy import optimize, special

from .errors import InvalidArgument, NumericalFailure

KERNEL_KINDS = ("gaussian", "linear", "matern")

# jitter escalation applied on failed factorizations
JITTER_STEPS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

LOG_LENGTHSCALE_BOUNDS = (math.log(1e-2), math.log(1e3))
LOG_AMPLITUDE_BOUNDS = (math.log(1e-3), math.log(1e4))

_PREDICT_CHUNK = 1 << 16


class HyperparameterFitWarning(UserWarning):
    """Emitted when marginal-likelihood fitting falls back to the initial kernel."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters for one stage.

    ``lengthscales_w`` covers the previous-output coordinates and
    ``lengthscales_x`` the control coordinates; the joint input is ordered
    ``(w, x)``.
    """

    kind: str = "gaussian"
    amplitude: float = 1.0
    lengthscales_w: tuple[float, ...] = ()
    lengthscales_x: tuple[float, ...] = (1.0,)
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidArgument(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "lengthscales_w", tuple(float(v) for v in self.lengthscales_w))
        object.__setattr__(self, "lengthscales_x", tuple(float(v) for v in self.lengthscales_x))
        if not self.amplitude > 0:
            raise InvalidArgument("kernel amplitude must be positive")
        if any(not v > 0 for v in self.lengthscales):
            raise InvalidArgument("lengthscales must be positive")
        if self.kind == "matern":
            if self.nu is None or not self.nu > 1:
                raise InvalidArgument("matern kernel needs nu > 1")

    @property
    def lengthscales(self) -> np.ndarray:
        return np.array(self.lengthscales_w + self.lengthscales_x, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.lengthscales_w) + len(self.lengthscales_x)

    @classmethod
    def isotropic(cls, dim_w: int, dim_x: int, lengthscale: float = 1.0,
                  amplitude: float = 1.0, kind: str = "gaussian", nu: float | None = None) -> "KernelSpec":
        return cls(kind=kind, amplitude=amplitude, lengthscales_w=(lengthscale,) * dim_w,
                   lengthscales_x=(lengthscale,) * dim_x, nu=nu)

    def with_log_params(self, theta: np.ndarray) -> "KernelSpec":
        """Rebuild from ``[log amplitude, log l_1, ..., log l_d]``."""
        theta = np.asarray(theta, dtype=float)
        ls = np.exp(theta[1:])
        nw = len(self.lengthscales_w)
        return replace(self, amplitude=float(np.exp(theta[0])),
                       lengthscales_w=tuple(ls[:nw]), lengthscales_x=tuple(ls[nw:]))

    def log_params(self) -> np.ndarray:
        return np.concatenate([[math.log(self.amplitude)], np.log(self.lengthscales)])


def _as_points(p, dim: int, name: str = "point") -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InvalidArgument(f"{name} has shape {np.shape(p)}, expected trailing dimension {dim}")
    return arr


def _scaled_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _matern_from_r(r: np.ndarray, nu: float) -> np.ndarray:
    s = math.sqrt(2.0 * nu) * r
    out = np.ones_like(s)
    pos = s > 0
    sp = s[pos]
    out[pos] = (2.0 ** (1.0 - nu) / special.gamma(nu)) * sp ** nu * special.kv(nu, sp)
    return out


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(a_i, b_j)``."""
    a = _as_points(a, spec.dim, "a")
    b = _as_points(b, spec.dim, "b")
    ls = spec.lengthscales
    if spec.kind == "linear":
        return spec.amplitude * ((a / ls) @ (b / ls).T)
    d2 = _scaled_sqdist(a / ls, b / ls)
    if spec.kind == "gaussian":
        return spec.amplitude * np.exp(-0.5 * d2)
    return spec.amplitude * _matern_from_r(np.sqrt(d2), spec.nu)


def kernel_diag(spec: KernelSpec, a) -> np.ndarray:
    """``k(p, p)`` for every row of ``a``."""
    a = _as_points(a, spec.dim, "a")
    if spec.kind == "linear":
        return spec.amplitude * np.sum((a / spec.lengthscales) ** 2, axis=1)
    return np.full(a.shape[0], spec.amplitude)


def kernel_eval(spec: KernelSpec, p, q) -> float:
    """Pointwise kernel value, computed directly from the defining formula."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != (spec.dim,) or q.shape != (spec.dim,):
        raise InvalidArgument(f"points must have dimension {spec.dim}, got {p.shape} and {q.shape}")
    ls = spec.lengthscales
    if spec.kind == "linear":
        return float(spec.amplitude * np.sum(p * q / ls ** 2))
    r2 = float(np.sum(((p - q) / ls) ** 2))
    if spec.kind == "gaussian":
        return float(spec.amplitude * math.exp(-0.5 * r2))
    return float(spec.amplitude * _matern_from_r(np.array([math.sqrt(r2)]), spec.nu)[0])


@dataclass(frozen=True, eq=False)
class StageDataset:
    """Observed ``((w, x), y)`` rows of one stage."""

    w: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if not (w.shape[0] == x.shape[0] == y.shape[0]):
            raise InvalidArgument("w, x and y must have the same number of rows")
        for arr in (w, x, y):
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument("dataset contains non-finite values")
            arr.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, dim_w: int, dim_x: int, dim_y: int = 1) -> "StageDataset":
        return cls(np.zeros((0, dim_w)), np.zeros((0, dim_x)), np.zeros((0, dim_y)))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w.shape[1], self.x.shape[1], self.y.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.w, self.x])

    def append(self, w, x, y) -> "StageDataset":
        dw, dx, dy = self.dims
        x = np.asarray(x, dtype=float).reshape(-1, dx)
        w = np.asarray(w, dtype=float).reshape(x.shape[0], dw)
        y = np.asarray(y, dtype=float).reshape(x.shape[0], dy)
        return StageDataset(np.vstack([self.w, w]), np.vstack([self.x, x]), np.vstack([self.y, y]))


def _factorize(K: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    n = K.shape[0]
    eye = np.eye(n)
    scale = max(1.0, float(np.max(np.abs(np.diag(K))))) if n else 1.0
    for jitter in JITTER_STEPS:
        try:
            L = np.linalg.cholesky(K + (noise + jitter * scale) * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter * scale
    try:
        cond = float(np.linalg.cond(K + noise * eye))
    except np.linalg.LinAlgError:
        cond = float("inf")
    raise NumericalFailure(f"Cholesky failed after jitter escalation (n={n}, cond={cond:.3e})", condition=cond)


@dataclass(frozen=True, eq=False)
class GPPosterior:
    """Fitted posterior of one stage; immutable and safe to share."""

    kernel: KernelSpec
    noise: float
    inputs: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    output_dim: int
    jitter: float = 0.0
    y: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.kernel.dim

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Batch posterior. Returns ``mean`` of shape (B, M) and ``var`` of shape (B,).

        The variance is shared by all outputs because they share the kernel.
        """
        P = _as_points(points, self.input_dim)
        B = P.shape[0]
        if self.n == 0:
            return np.zeros((B, self.output_dim)), np.maximum(kernel_diag(self.kernel, P), 0.0)
        if B > _PREDICT_CHUNK:
            parts = [self.predict(P[i:i + _PREDICT_CHUNK]) for i in range(0, B, _PREDICT_CHUNK)]
            return np.vstack([m for m, _ in parts]), np.concatenate([v for _, v in parts])
        Ks = kernel_matrix(self.kernel, P, self.inputs)
        mean = Ks @ self.alpha
        v = sla.solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = kernel_diag(self.kernel, P) - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def predict_std(self, points) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.predict(points)
        return mean, np.sqrt(var)


def _dataset_arrays(data: StageDataset) -> tuple[np.ndarray, np.ndarray]:
    return data.inputs, data.y


def fit_posterior(data: StageDataset, kernel: KernelSpec, noise: float = 1e-4) -> GPPosterior:
    """Condition the zero-mean GP prior on ``data``."""
    if not noise > 0:
        raise InvalidArgument("GP noise variance must be positive")
    X, Y = _dataset_arrays(data)
    if X.shape[1] != kernel.dim:
        raise InvalidArgument(f"data input dim {X.shape[1]} does not match kernel dim {kernel.dim}")
    if data.n == 0:
        return GPPosterior(kernel, noise, X, np.zeros((0, 0)), np.zeros((0, Y.shape[1])), Y.shape[1], y=Y)
    K = kernel_matrix(kernel, X, X)
    L, jitter = _factorize(K, noise)
    alpha = sla.cho_solve((L, True), Y, check_finite=False)
    for arr in (X, L, alpha):
        arr.setflags(write=False)
    return GPPosterior(kernel, noise, X, L, alpha, Y.shape[1], jitter=jitter, y=Y)


def posterior_mean_var(gp: GPPosterior, p) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance per output at a single joint point."""
    P = np.asarray(p, dtype=float)
    if P.ndim != 1:
        raise InvalidArgument("posterior_mean_var expects one point; use GPPosterior.predict for batches")
    mean, var = gp.predict(P)
    return mean[0], np.full(gp.output_dim, var[0])


def log_marginal_likelihood(data: StageDataset, kernel: KernelSpec, noise: float = 1e-4) -> float:
    """Log evidence summed over the independent outputs."""
    if data.n == 0:
        return 0.0
    gp = fit_posterior(data, kernel, noise)
    return _lml_from_posterior(gp, data.y)


def _lml_from_posterior(gp: GPPosterior, Y: np.ndarray) -> float:
    n, M = Y.shape
    fit = float(np.sum(Y * gp.alpha))
    logdet = 2.0 * float(np.sum(np.log(np.diag(gp.chol))))
    return -0.5 * fit - 0.5 * M * logdet - 0.5 * n * M * math.log(2.0 * math.pi)


def _neg_lml_and_grad(theta: np.ndarray, template: KernelSpec, X: np.ndarray, Y: np.ndarray,
                      noise: float) -> tuple[float, np.ndarray]:
    kernel = template.with_log_params(theta)
    n, M = Y.shape
    ls = kernel.lengthscales
    Xs = X / ls
    diffs2 = (Xs[:, None, :] - Xs[None, :, :]) ** 2
    K = kernel.amplitude * np.exp(-0.5 * diffs2.sum(axis=-1))
    try:
        L, _ = _factorize(K, noise)
    except NumericalFailure:
        return 1e25, np.zeros_like(theta)
    alpha = sla.cho_solve((L, True), Y, check_finite=False)
    Kinv = sla.cho_solve((L, True), np.eye(n), check_finite=False)
    lml = -0.5 * float(np.sum(Y * alpha)) - M * float(np.sum(np.log(np.diag(L)))) \
        - 0.5 * n * M * math.log(2.0 * math.pi)
    inner = alpha @ alpha.T - M * Kinv
    grad = np.empty_like(theta)
    grad[0] = 0.5 * float(np.sum(inner * K))
    # dK/dlog l_i = K * (x_i - x_i')^2 / l_i^2, and diffs2 is already scaled
    grad[1:] = 0.5 * np.einsum("ij,ijk->k", inner * K, diffs2)
    return -lml, -grad


def _neg_lml_generic(theta: np.ndarray, template: KernelSpec, data: StageDataset, noise: float) -> float:
    try:
        return -log_marginal_likelihood(data, template.with_log_params(theta), noise)
    except NumericalFailure:
        return 1e25


def fit_hyperparams(data: StageDataset, init: KernelSpec, noise: float = 1e-4,
                    n_restarts: int = 5, seed: int | np.random.Generator = 0) -> KernelSpec:
    """Maximize the marginal likelihood over log-amplitude and log-lengthscales.

    The noise variance stays fixed.  Starts from ``init`` plus ``n_restarts``
    log-uniform random points inside the bounds; the result never has a lower
    evidence than ``init``.
    """
    if data.n == 0:
        return init
    rng = np.random.default_rng(seed)
    X, Y = _dataset_arrays(data)
    bounds = [LOG_AMPLITUDE_BOUNDS] + [LOG_LENGTHSCALE_BOUNDS] * init.dim
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    theta0 = np.clip(init.log_params(), lo, hi)
    starts = [theta0] + [rng.uniform(lo, hi) for _ in range(n_restarts)]

    if init.kind == "gaussian":
        fun, jac = (lambda th: _neg_lml_and_grad(th, init, X, Y, noise)), True
    else:
        fun, jac = (lambda th: _neg_lml_generic(th, init, data, noise)), None

    best_theta, best_val = None, np.inf
    for start in starts:
        try:
            res = optimize.minimize(fun, start, jac=jac, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 200})
        except (ValueError, FloatingPointError, np.linalg.LinAlgError):
            continue
        val = float(res.fun)
        if np.isfinite(val) and val < 1e24 and val < best_val:
            best_theta, best_val = np.clip(res.x, lo, hi), val

    try:
        init_lml = log_marginal_likelihood(data, init, noise)
    except NumericalFailure:
        init_lml = -np.inf
    if best_theta is None:
        warnings.warn("all hyperparameter restarts failed; keeping the initial kernel",
                      HyperparameterFitWarning, stacklevel=2)
        return init
    fitted = init.with_log_params(best_theta)
    try:
        fitted_lml = log_marginal_likelihood(data, fitted, noise)
    except NumericalFailure:
        fitted_lml = -np.inf
    if fitted_lml < init_lml:
        return init
    return fitted


@dataclass(frozen=True, eq=False)
class RFFSample:
    """A function drawn from (an approximation of) a GP prior.

    Uses paired features ``z(p) = sqrt(a / D) [cos(Omega p), sin(Omega p)]``
    so that ``<z(p), z(p)> = a`` holds exactly.
    """

    omega: np.ndarray
    weights: np.ndarray
    amplitude: float
    seed: int | None = None
    paired: bool = True

    @property
    def n_features(self) -> int:
        return self.omega.shape[0]

    @property
    def input_dim(self) -> int:
        return self.omega.shape[1]

    def features(self, points) -> np.ndarray:
        P = _as_points(points, self.input_dim)
        proj = P @ self.omega.T
        scale = math.sqrt(self.amplitude / self.n_features)
        return scale * np.hstack([np.cos(proj), np.sin(proj)])

    def __call__(self, points) -> np.ndarray:
        P = _as_points(points, self.input_dim)
        out = np.empty(P.shape[0])
        step = 8192
        for i in range(0, P.shape[0], step):
            out[i:i + step] = self.features(P[i:i + step]) @ self.weights
        return out

    def gradient(self, points) -> np.ndarray:
        """Exact gradient of the sample path, shape (B, d)."""
        P = _as_points(points, self.input_dim)
        D = self.n_features
        wc, ws = self.weights[:D], self.weights[D:]
        out = np.empty(P.shape)
        step = 8192
        for i in range(0, P.shape[0], step):
            proj = P[i:i + step] @ self.omega.T
            coef = -np.sin(proj) * wc + np.cos(proj) * ws
            out[i:i + step] = coef @ self.omega
        return math.sqrt(self.amplitude / D) * out

    def kernel_estimate(self, p, q) -> np.ndarray:
        return self.features(p) @ self.features(q).T


def sample_path(kernel: KernelSpec, n_features: int = 1000, seed: int = 0) -> RFFSample:
    """Draw one prior sample path through random Fourier features."""
    if n_features < 1:
        raise InvalidArgument("n_features must be at least 1")
    if kernel.kind == "linear":
        raise InvalidArgument("random Fourier features need a stationary kernel")
    rng = np.random.default_rng(seed)
    d = kernel.dim
    z = rng.standard_normal((n_features, d))
    if kernel.kind == "matern":
        # Student-t spectral density with 2*nu degrees of freedom
        dof = 2.0 * kernel.nu
        z = z * np.sqrt(dof / rng.chisquare(dof, size=(n_features, 1)))
    omega = z / kernel.lengthscales
    weights = rng.standard_normal(2 * n_features)
    omega.setflags(write=False)
    weights.setflags(write=False)
    return RFFSample(omega=omega, weights=weights, amplitude=kernel.amplitude, seed=seed)


def information_gain(K, noise: float = 1e-4, tol: float = 1e-8) -> float:
    """Mutual information ``0.5 * log det(I + K / noise)`` of a point set."""
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return 0.0
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidArgument("K must be a square matrix")
    if not np.allclose(K, K.T, atol=tol * max(1.0, float(np.max(np.abs(K))))):
        raise InvalidArgument("K is not symmetric")
    K = 0.5 * (K + K.T)
    eig = np.linalg.eigvalsh(K)
    if eig[0] < -tol * max(1.0, float(abs(eig[-1]))):
        raise InvalidArgument(f"K is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
    eig = np.maximum(eig, 0.0)
    return 0.5 * float(np.sum(np.log1p(eig / noise)))
