"""Small dense linear algebra and optimisation helpers.

Everything here works on plain ``numpy`` arrays. Matrices in this package are
tiny (at most 12x12), so there is no attempt at sparse or blocked storage.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = [
    "NotPositiveDefinite",
    "NonFiniteObjective",
    "cholesky",
    "jittered_cholesky",
    "solve_psd",
    "minimize",
    "fd_gradient",
]

JITTER_SCALE = 1e-8
JITTER_GROWTH = 10.0
JITTER_TRIES = 3


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


class NonFiniteObjective(FloatingPointError):
    """Raised when an objective or its gradient evaluates to NaN/Inf."""


def cholesky(A) -> np.ndarray:
    """Lower-triangular ``L`` with ``A = L @ L.T``.

    Raises
    ------
    NotPositiveDefinite
        If ``A`` is not numerically positive definite.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got shape {A.shape}")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def jittered_cholesky(A) -> tuple[np.ndarray, float]:
    """Cholesky with diagonal jitter escalation.

    Tries ``A`` as is, then ``A + j*I`` with ``j = 1e-8 * mean(diag(A))``
    growing tenfold up to three times. Returns the factor and the jitter
    that was finally added (0.0 when none was needed).
    """
    A = np.asarray(A, dtype=float)
    try:
        return cholesky(A), 0.0
    except NotPositiveDefinite:
        pass
    scale = float(np.mean(np.diag(A)))
    if not scale > 0.0:
        scale = 1.0
    jitter = JITTER_SCALE * scale
    eye = np.eye(A.shape[0])
    for _ in range(JITTER_TRIES):
        try:
            return cholesky(A + jitter * eye), jitter
        except NotPositiveDefinite:
            jitter *= JITTER_GROWTH
    # last attempt at the largest jitter; let the error propagate
    return cholesky(A + jitter * eye), jitter


def solve_psd(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise ValueError("dimension mismatch between A and b")
    L = cholesky(A)
    return scipy.linalg.cho_solve((L, True), b, check_finite=False)


def _check_finite(value: float, grad: np.ndarray) -> None:
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteObjective("objective or gradient is not finite")


def minimize(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    max_iters: int = 200,
    tol: float = 1e-8,
) -> np.ndarray:
    """Nonlinear conjugate gradient (Polak-Ribiere+) with Armijo backtracking.

    ``objective(x)`` must return ``(value, gradient)``. Stops when the
    max-norm of the gradient drops to ``tol`` or after ``max_iters``
    iterations. Every accepted step satisfies the Armijo condition, so the
    returned point never has a larger objective than ``x0``.

    Raises
    ------
    NonFiniteObjective
        If the objective is NaN/Inf at ``x0``. Non-finite values met during a
        line search are treated as a failed trial step.
    """
    c1 = 1e-4
    shrink = 0.5
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    _check_finite(f, g)

    d = -g
    step = 1.0 / max(1.0, float(np.max(np.abs(g))))
    prev_slope = None
    for it in range(max_iters):
        if np.max(np.abs(g)) <= tol:
            break
        slope = float(g @ d)
        if slope >= 0.0:
            # not a descent direction: restart along steepest descent
            d = -g
            slope = float(g @ d)
        if prev_slope is not None:
            step = 2.0 * step * prev_slope / slope
        alpha = step
        accepted = False
        for _ in range(60):
            x_try = x + alpha * d
            f_try, g_try = objective(x_try)
            f_try = float(f_try)
            if math.isfinite(f_try) and f_try <= f + c1 * alpha * slope:
                g_try = np.asarray(g_try, dtype=float)
                if np.all(np.isfinite(g_try)):
                    accepted = True
                    break
            alpha *= shrink
        if not accepted:
            break
        y = g_try - g
        beta = max(0.0, float(g_try @ y) / float(g @ g))
        x, f, g = x_try, f_try, g_try
        prev_slope = slope
        step = alpha
        d = -g + beta * d
        if (it + 1) % x.size == 0:
            d = -g
    return x


def fd_gradient(objective: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (objective(x + e) - objective(x - e)) / (2.0 * h)
    return grad
