"""Gaussian-process model of a vehicle's velocity time series.

The GP has a zero prior mean and a unit-amplitude RBF kernel with i.i.d.
Gaussian observation noise. A vehicle fits the two hyperparameters on its own
last five velocity samples by maximising the leave-one-out (LOO) predictive
log probability, then ships hyperparameters and samples to its followers.
Receivers rebuild the predictive distribution from that and use it while
packets are being lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .numerics import NonFiniteObjective, NotPositiveDefinite, jittered_cholesky, minimize

__all__ = [
    "GpHyperParams",
    "VelocityHistory",
    "GpPrediction",
    "DEFAULT_HYPER",
    "rbf_kernel",
    "kernel_matrix",
    "loo_objective",
    "fit",
    "predict",
    "predict_position",
    "predict_positions",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Box for the fitted hyperparameters. A noise-free, nearly constant signal
# drives the LOO optimum to ever longer length-scales and ever smaller noise,
# so the search is confined to a range where K stays factorizable.
GAMMA_BOUNDS = (0.02, 20.0)
NOISE_BOUNDS = (1e-3, 10.0)
POSITION_GRID = 0.1


@dataclass(frozen=True)
class GpHyperParams:
    gamma: float
    gamma_noise: float

    def __post_init__(self):
        if not (self.gamma > 0 and self.gamma_noise > 0):
            raise ValueError(f"hyperparameters must be positive, got {self}")

    @property
    def log_params(self) -> np.ndarray:
        return np.log([self.gamma, self.gamma_noise])

    @classmethod
    def from_log(cls, theta) -> "GpHyperParams":
        return cls(float(math.exp(theta[0])), float(math.exp(theta[1])))


DEFAULT_HYPER = GpHyperParams(gamma=0.5, gamma_noise=0.1)


@dataclass(frozen=True)
class VelocityHistory:
    """Timestamped velocity samples, oldest first."""

    times: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        v = np.asarray(self.velocities, dtype=float).reshape(-1)
        if t.shape != v.shape:
            raise ValueError("times and velocities must have the same length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("history timestamps must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "velocities", v)

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def empty(cls) -> "VelocityHistory":
        return cls(np.empty(0), np.empty(0))


@dataclass(frozen=True)
class GpPrediction:
    mean: np.ndarray
    covariance: np.ndarray
    query_times: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def rbf_kernel(t, t_prime, gamma: float):
    """Squared-exponential covariance ``exp(-|t - t'|^2 / (2 gamma^2))``.

    Broadcasts over array inputs.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    diff = np.subtract(t, t_prime)
    return np.exp(-0.5 * (diff / gamma) ** 2)


def _cross(t_a, t_b, gamma: float) -> np.ndarray:
    return rbf_kernel(np.asarray(t_a, float)[:, None], np.asarray(t_b, float)[None, :], gamma)


def kernel_matrix(times, hyper: GpHyperParams) -> np.ndarray:
    """Noisy covariance of the observations, ``K_r + gamma_noise^2 I``."""
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0:
        raise ValueError("kernel_matrix needs at least one time stamp")
    K = _cross(times, times, hyper.gamma)
    K[np.diag_indices_from(K)] += hyper.gamma_noise**2
    return K


def loo_objective(history: VelocityHistory, hyper: GpHyperParams) -> tuple[float, np.ndarray]:
    """Summed leave-one-out log predictive probability and its gradient.

    Each held-out sample ``v_i`` is scored under the Gaussian predictive
    distribution obtained by conditioning on the remaining samples; the
    predictive variance includes the observation noise. The gradient is taken
    with respect to ``(log gamma, log gamma_noise)``.

    Uses the closed-form LOO identities ``mu_i = v_i - [K^-1 v]_i / [K^-1]_ii``
    and ``sigma_i^2 = 1 / [K^-1]_ii``, so a single factorization serves all
    held-out points.
    """
    t = history.times
    y = history.velocities
    n = t.size
    if n < 2:
        raise ValueError("LOO objective needs at least two observations")
    gamma, noise = hyper.gamma, hyper.gamma_noise

    diff2 = (t[:, None] - t[None, :]) ** 2
    Kr = np.exp(-0.5 * diff2 / gamma**2)
    K = Kr + noise**2 * np.eye(n)
    L, _ = jittered_cholesky(K)
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    alpha = Kinv @ y
    kii = np.diag(Kinv)
    if np.any(kii <= 0):
        raise NotPositiveDefinite("LOO precision diagonal is not positive")

    value = float(np.sum(0.5 * np.log(kii) - 0.5 * alpha**2 / kii) - 0.5 * n * _LOG_2PI)

    grad = np.empty(2)
    dK_gamma = Kr * diff2 / gamma**2
    dK_noise = 2.0 * noise**2 * np.eye(n)
    for j, dK in enumerate((dK_gamma, dK_noise)):
        Z = Kinv @ dK
        z_alpha = Z @ alpha
        z_kinv_diag = np.einsum("ij,ji->i", Z, Kinv)
        grad[j] = np.sum((alpha * z_alpha - 0.5 * (1.0 + alpha**2 / kii) * z_kinv_diag) / kii)
    return value, grad


def _to_box(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map unconstrained ``z`` into the log-hyperparameter box; also return d theta / d z."""
    lo = np.log([GAMMA_BOUNDS[0], NOISE_BOUNDS[0]])
    hi = np.log([GAMMA_BOUNDS[1], NOISE_BOUNDS[1]])
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s)


def _from_box(theta: np.ndarray) -> np.ndarray:
    lo = np.log([GAMMA_BOUNDS[0], NOISE_BOUNDS[0]])
    hi = np.log([GAMMA_BOUNDS[1], NOISE_BOUNDS[1]])
    s = np.clip((theta - lo) / (hi - lo), 1e-9, 1.0 - 1e-9)
    return np.log(s / (1.0 - s))


def fit(
    history: VelocityHistory,
    init: GpHyperParams = DEFAULT_HYPER,
    max_iters: int = 40,
    tol: float = 1e-6,
) -> GpHyperParams:
    """Maximise the LOO objective over the hyperparameters.

    The search runs conjugate gradients in an unconstrained coordinate that is
    mapped smoothly into ``GAMMA_BOUNDS x NOISE_BOUNDS``; ``init`` is clipped
    into that box first. Histories shorter than two samples, and any
    non-finite or non-factorizable objective, return ``init`` unchanged.
    """
    if len(history) < 2:
        return init

    def negated(z):
        theta, dtheta = _to_box(z)
        try:
            value, grad = loo_objective(history, GpHyperParams.from_log(theta))
        except (NotPositiveDefinite, ValueError):
            return math.inf, np.full(2, math.nan)
        return -value, -grad * dtheta

    theta0 = init.log_params
    z0 = _from_box(theta0)
    start = GpHyperParams.from_log(_to_box(z0)[0])
    try:
        z = minimize(negated, z0, max_iters=max_iters, tol=tol)
    except NonFiniteObjective:
        return init
    result = GpHyperParams.from_log(_to_box(z)[0])
    try:
        if loo_objective(history, result)[0] < loo_objective(history, init)[0] - 1e-12:
            return init
    except (NotPositiveDefinite, ValueError):
        return start
    return result


def predict(history: VelocityHistory, hyper: GpHyperParams, query_times) -> GpPrediction:
    """Posterior mean and covariance of the noise-free velocity at ``query_times``."""
    tq = np.asarray(query_times, dtype=float).reshape(-1)
    if tq.size == 0:
        raise ValueError("predict needs at least one query time")
    prior = _cross(tq, tq, hyper.gamma)
    if len(history) == 0:
        return GpPrediction(np.zeros(tq.size), prior, tq)
    L, _ = jittered_cholesky(kernel_matrix(history.times, hyper))
    Ks = _cross(tq, history.times, hyper.gamma)
    mean = Ks @ scipy.linalg.cho_solve((L, True), history.velocities, check_finite=False)
    W = scipy.linalg.solve_triangular(L, Ks.T, lower=True, check_finite=False)
    cov = prior - W.T @ W
    cov = 0.5 * (cov + cov.T)
    diag = np.diag_indices_from(cov)
    cov[diag] = np.maximum(cov[diag], 0.0)
    return GpPrediction(mean, cov, tq)


def predict_positions(
    x0: float,
    t0: float,
    history: VelocityHistory,
    hyper: GpHyperParams,
    times,
    grid: float = POSITION_GRID,
) -> np.ndarray:
    """Expected positions at ``times`` (all >= ``t0``) starting from ``x0`` at ``t0``.

    Integrates the predictive mean velocity with the trapezoid rule on a grid
    of spacing ``grid`` anchored at ``t0``; target times are inserted as extra
    nodes.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if np.any(times < t0 - 1e-12):
        raise ValueError("position query before the anchor time")
    t_end = float(times.max()) if times.size else t0
    n_steps = int(math.floor((t_end - t0) / grid + 1e-9))
    nodes = t0 + grid * np.arange(n_steps + 1)
    nodes = np.concatenate([nodes, times])
    nodes = np.unique(np.round(nodes, 9))
    nodes[0] = t0
    mean = predict(history, hyper, nodes).mean
    increments = 0.5 * (mean[1:] + mean[:-1]) * np.diff(nodes)
    cumulative = np.concatenate([[0.0], np.cumsum(increments)])
    idx = np.searchsorted(nodes, np.round(times, 9))
    return x0 + cumulative[idx]


def predict_position(
    x0: float, t0: float, history: VelocityHistory, hyper: GpHyperParams, t1: float
) -> float:
    """Expected position at ``t1`` given position ``x0`` at ``t0``."""
    if not t1 > t0:
        raise ValueError("t1 must be later than t0")
    return float(predict_positions(x0, t0, history, hyper, [t1])[0])
