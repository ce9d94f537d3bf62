"""Dense convex QP solver: primal active set with a phase-1 start.

Solves::

    minimize    0.5 x'Hx + g'x + c0
    subject to  G x <= h

for small dense problems (a handful of variables, tens of constraints).
Equality constraints are expressed as two opposite inequalities.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = ["QuadraticProgram", "QpSolution", "QpStatus", "solve", "kkt_residuals"]

LOG = logging.getLogger(__name__)

_PSD_FLOOR = 1e-10


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    G: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    h: np.ndarray = field(default_factory=lambda: np.empty(0))
    c0: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.size
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n) if np.size(self.G) else np.empty((0, n))
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if self.G.shape[0] != self.h.size:
            raise ValueError("G and h disagree on the number of constraints")

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x + self.c0)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    multipliers: np.ndarray
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residuals(qp: QuadraticProgram, x, lam) -> dict[str, float]:
    """Max-norm primal infeasibility, stationarity and complementarity."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    slack = qp.G @ x - qp.h if qp.h.size else np.zeros(0)
    return {
        "primal": float(np.max(np.maximum(slack, 0.0), initial=0.0)),
        "stationarity": float(np.max(np.abs(qp.H @ x + qp.g + qp.G.T @ lam), initial=0.0)),
        "complementarity": float(abs(lam @ slack)) if lam.size else 0.0,
        "dual": float(-min(np.min(lam, initial=0.0), 0.0)),
    }


def _null_space(A: np.ndarray, n: int) -> np.ndarray:
    if A.shape[0] == 0:
        return np.eye(n)
    q, _ = np.linalg.qr(A.T, mode="complete")
    return q[:, A.shape[0]:]


def _active_set(H, g, G, h, x, working, max_iter, tol, positive_definite):
    """Primal active-set iterations from a feasible ``x``.

    Returns ``(x, multipliers_on_working_set, working, status, iterations)``.
    ``working`` holds linearly independent constraint indices.
    """
    n = x.size
    m = h.size
    step_tol = 1e-12 * max(1.0, float(np.max(np.abs(x), initial=0.0)))
    # after a few zero-length steps in a row, switch to Bland's smallest-index
    # rule for both adding and dropping constraints, which cannot cycle
    stalled = 0
    for it in range(1, max_iter + 1):
        bland = stalled >= 3
        grad = H @ x + g
        A = G[working] if working else np.empty((0, n))
        k = len(working)
        lam_w = None
        ray = False
        if positive_definite:
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = H
            kkt[:n, n:] = A.T
            kkt[n:, :n] = A
            rhs = np.concatenate([-grad, np.zeros(k)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            p = sol[:n]
            lam_w = sol[n:]
        else:
            Z = _null_space(A, n)
            if Z.shape[1] == 0:
                p = np.zeros(n)
            else:
                Hr = Z.T @ H @ Z
                gr = Z.T @ grad
                w, V = np.linalg.eigh(Hr)
                gv = V.T @ gr
                flat = w <= 1e-12 * max(1.0, float(np.max(np.abs(w))))
                if np.any(flat & (np.abs(gv) > tol)):
                    ray = True
                    p = -Z @ (V[:, flat] @ gv[flat])
                else:
                    coef = np.zeros_like(gv)
                    coef[~flat] = gv[~flat] / w[~flat]
                    p = -Z @ (V @ coef)

        if np.max(np.abs(p), initial=0.0) <= step_tol:
            if k == 0:
                return x, np.zeros(0), working, QpStatus.OPTIMAL, it
            if lam_w is None:
                lam_w = np.linalg.lstsq(A.T, -grad, rcond=None)[0]
            j = int(np.argmin(lam_w))
            if lam_w[j] >= -tol:
                return x, lam_w, working, QpStatus.OPTIMAL, it
            if bland:
                j = min((i for i in range(k) if lam_w[i] < -tol), key=lambda i: working[i])
            working = working[:j] + working[j + 1:]
            continue

        Gp = G @ p
        alpha = np.inf if ray else 1.0
        blocking = -1
        in_w = np.zeros(m, dtype=bool)
        in_w[working] = True
        candidates = np.flatnonzero((Gp > 1e-12 * max(1.0, float(np.max(np.abs(p))))) & ~in_w)
        if candidates.size:
            ratios = np.maximum((h[candidates] - G[candidates] @ x) / Gp[candidates], 0.0)
            j = int(np.argmin(ratios))
            if bland:
                j = int(np.flatnonzero(ratios <= ratios[j])[0])
            if ratios[j] < alpha:
                alpha = float(ratios[j])
                blocking = int(candidates[j])
        if not np.isfinite(alpha):
            raise ValueError("QP is unbounded below along a feasible ray")
        x = x + alpha * p
        stalled = stalled + 1 if alpha * np.max(np.abs(p)) <= step_tol else 0
        if blocking >= 0:
            working = working + [blocking]
    return x, np.zeros(len(working)), working, QpStatus.MAX_ITER, max_iter


def _phase_one(G, h, x_start, max_iter, tol):
    """Minimise the largest constraint violation ``t`` over ``(x, t)``.

    Returns ``(x, t_opt, status)``.
    """
    m, n = G.shape
    viol = G @ x_start - h
    t0 = float(max(np.max(viol), 0.0))
    # rows: G x - t <= h ; -t <= 0
    G1 = np.zeros((m + 1, n + 1))
    G1[:m, :n] = G
    G1[:m, n] = -1.0
    G1[m, n] = -1.0
    h1 = np.concatenate([h, [0.0]])
    g1 = np.zeros(n + 1)
    g1[n] = 1.0
    y = np.concatenate([x_start, [t0]])
    working = [int(np.argmax(viol))]
    y, _, _, status, _ = _active_set(
        np.zeros((n + 1, n + 1)), g1, G1, h1, y, working, max_iter, tol, positive_definite=False
    )
    return y[:n], float(y[n]), status


def solve(qp: QuadraticProgram, tol: float = 1e-8, x0=None, max_iter: int | None = None) -> QpSolution:
    """Solve a convex QP.

    ``x0`` is an optional starting guess; when it is feasible the phase-1
    problem is skipped. Otherwise the largest constraint violation is driven
    to its minimum first, and a positive minimum is reported as
    ``QpStatus.INFEASIBLE``.
    """
    n = qp.n
    H = 0.5 * (qp.H + qp.H.T)
    G, h = qp.G, qp.h
    if max_iter is None:
        max_iter = 200 * max(n, 1)

    w = np.linalg.eigvalsh(H) if n else np.zeros(0)
    floor = _PSD_FLOOR * max(1.0, float(np.max(np.abs(w), initial=0.0)))
    lam_min = float(w[0]) if n else 0.0
    if lam_min < -floor:
        H = H + (floor - lam_min) * np.eye(n)
        lam_min = floor
    positive_definite = lam_min > floor

    def finish(x, lam_w, working, status, iters):
        lam = np.zeros(h.size)
        if status is QpStatus.OPTIMAL and working:
            lam[working] = lam_w
        if status is QpStatus.MAX_ITER:
            LOG.warning("QP hit the iteration budget (%d)", max_iter)
        return QpSolution(x, qp.objective(x), status, lam, iters)

    x_unc = np.linalg.solve(H, -qp.g) if positive_definite else None
    if h.size == 0 and x_unc is not None:
        return finish(x_unc, np.zeros(0), [], QpStatus.OPTIMAL, 0)

    candidates = []
    if x0 is not None:
        candidates.append(np.asarray(x0, dtype=float).reshape(n))
    if x_unc is not None:
        candidates.append(x_unc)
    candidates.append(np.zeros(n))
    violations = [float(np.max(G @ c - h, initial=0.0)) for c in candidates]
    start = None
    for cand, viol in zip(candidates, violations):
        if viol <= 0.0:
            start = cand
            break

    iters = 0
    if start is None:
        x_start = candidates[int(np.argmin(violations))]
        x_feas, t_opt, status = _phase_one(G, h, x_start, max_iter, tol)
        if status is QpStatus.MAX_ITER:
            return finish(x_start, None, [], QpStatus.MAX_ITER, max_iter)
        if t_opt > tol:
            return QpSolution(x_feas, qp.objective(x_feas), QpStatus.INFEASIBLE, np.zeros(h.size), 0)
        start = x_feas

    x, lam_w, working, status, iters = _active_set(
        H, qp.g, G, h, np.array(start, dtype=float), [], max_iter, tol, positive_definite
    )
    return finish(x, lam_w, working, status, iters)
