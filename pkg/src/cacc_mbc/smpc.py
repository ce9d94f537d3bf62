"""Hybrid stochastic MPC for one platoon member.

Every follower has two operating modes per prediction step, free following
and emergency braking. The mode is tied to the predicted gap error with
big-M (mixed logical dynamical) constraints, and emergency braking pins the
input to ``u_min``. Uncertainty in the nearest predecessor's velocity forecast
is discretised into three constant-node scenarios with Gauss-Hermite
weights. The mixed-integer problem is solved exactly by enumerating every mode
sequence and every surviving scenario, one small convex QP each, with pruning
that never changes the arg-min.
"""

from __future__ import annotations

import enum
import functools
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpsolver
from .qp import QpStatus, QuadraticProgram
from .vehicle import Mode, VehicleParams, VehicleState, discrete_matrices, stopping_distance

__all__ = [
    "HorizonTooLarge",
    "MpcConfig",
    "ForecastSource",
    "PredecessorForecast",
    "Scenario",
    "SmpcResult",
    "build_scenarios",
    "build_qp",
    "enumerate_candidates",
    "solve_smpc",
    "solve_leader",
    "rollout",
]

LOG = logging.getLogger(__name__)

MAX_ENUMERATED_HORIZON = 12
EQUALITY_SLACK = 1e-9
GH_WEIGHTS = {-1: 1.0 / 6.0, 0: 2.0 / 3.0, 1: 1.0 / 6.0}
GH_OFFSET = math.sqrt(3.0)

# extended prediction state: [dd, dv, a, v, x - x0]
_DD, _DV, _A, _V, _X = range(5)


class HorizonTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    N: int = 7
    t_s: float = 0.1
    Q: tuple = ((1.0, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.1))
    R_ref: tuple = (0.0, 0.0, 0.0)
    q: float = 10.0
    p_tilde: float = 0.01**7
    r: int = 1
    lookahead_weight: float = 0.2
    c_d: tuple | None = None
    c_v: tuple | None = None
    input_weight: float = 0.01
    big_m: float = 200.0
    eps: float = 1e-4
    stopping_constraint: bool = True
    stopping_margin: float = 0.0
    qp_tol: float = 1e-8

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.r < 1:
            raise ValueError("look-ahead r must be at least 1")
        if self.q < 0:
            raise ValueError("q must be non-negative")
        if not 0.0 < self.p_tilde <= 1.0:
            raise ValueError("p_tilde must lie in (0, 1]")
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape != (3, 3) or np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise ValueError("Q must be a 3x3 positive semidefinite matrix")

    @property
    def Q_matrix(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)

    def lookahead_coefficients(self, r_eff: int) -> tuple[np.ndarray, np.ndarray]:
        """Weights ``(c_d, c_v)`` for predecessors ``n-1, ..., n-r_eff``."""
        default = np.full(r_eff, self.lookahead_weight / r_eff)
        c_d = default if self.c_d is None else np.asarray(self.c_d, dtype=float)[:r_eff]
        c_v = default if self.c_v is None else np.asarray(self.c_v, dtype=float)[:r_eff]
        if c_d.size < r_eff or c_v.size < r_eff:
            raise ValueError("c_d/c_v shorter than the look-ahead count")
        return c_d, c_v


class ForecastSource(enum.Enum):
    RECEIVED_MPC = "mpc"
    GP_PREDICTED = "gp"


@dataclass(frozen=True)
class PredecessorForecast:
    """Predicted trajectory of one predecessor over steps ``0..N-1``."""

    vehicle_id: int
    velocities: np.ndarray
    positions: np.ndarray
    accelerations: np.ndarray
    std: np.ndarray
    source: ForecastSource

    def __post_init__(self):
        for name in ("velocities", "positions", "accelerations", "std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = self.velocities.size
        if not (self.positions.size == self.accelerations.size == self.std.size == n):
            raise ValueError("forecast arrays must share one length")
        if np.any(self.std < 0):
            raise ValueError("forecast std must be non-negative")

    @property
    def deterministic(self) -> bool:
        return not np.any(self.std > 0)


@dataclass(frozen=True)
class Scenario:
    node: int
    log_prob: float


@dataclass
class SmpcResult:
    u0: float
    planned_velocities: np.ndarray
    planned_states: np.ndarray
    mode0: Mode
    mode_sequence: tuple
    scenario: Scenario | None
    objective: float
    diagnostics: dict = field(default_factory=dict)


def enumerate_candidates(config: MpcConfig) -> list[tuple]:
    """All ``2**N`` mode sequences, lexicographic with step 0 most significant."""
    if config.N > MAX_ENUMERATED_HORIZON:
        raise HorizonTooLarge(f"N={config.N} exceeds the enumeration guard {MAX_ENUMERATED_HORIZON}")
    return list(itertools.product((0, 1), repeat=config.N))


def build_scenarios(forecast: PredecessorForecast, config: MpcConfig) -> list[Scenario]:
    """Constant-node scenarios for the forecast's velocity uncertainty.

    A deterministic forecast gives the single nominal scenario with
    probability one. Otherwise nodes ``-1, 0, +1`` (velocity offsets of
    ``-sqrt(3) sigma``, ``0``, ``+sqrt(3) sigma`` at every step) get the
    trajectory log-probability ``N * ln(weight)``; scenarios below the chance
    floor ``ln(p_tilde)`` are dropped.
    """
    if forecast.deterministic:
        return [Scenario(0, 0.0)]
    floor = math.log(config.p_tilde)
    out = []
    for node in (-1, 0, 1):
        log_prob = config.N * math.log(GH_WEIGHTS[node])
        if log_prob >= floor:
            out.append(Scenario(node, log_prob))
    return out


@functools.lru_cache(maxsize=64)
def _prediction_matrices(params: VehicleParams, t_s: float, N: int):
    """Stacked ``Phi[k], Gamma[k], Psi[k]`` for ``k = 0..N`` of the extended model."""
    Ad, Bd, Dd = discrete_matrices(params, t_s)
    Ae = np.zeros((5, 5))
    Ae[:3, :3] = Ad
    Ae[_V, _A] = t_s
    Ae[_V, _V] = 1.0
    Ae[_X, _V] = t_s
    Ae[_X, _X] = 1.0
    Be = np.zeros(5)
    Be[:3] = Bd[:, 0]
    De = np.zeros(5)
    De[:3] = Dd[:, 0]

    Phi = np.zeros((N + 1, 5, 5))
    Gam = np.zeros((N + 1, 5, N))
    Psi = np.zeros((N + 1, 5, N))
    Phi[0] = np.eye(5)
    for k in range(N):
        Phi[k + 1] = Ae @ Phi[k]
        Gam[k + 1] = Ae @ Gam[k]
        Gam[k + 1][:, k] = Be
        Psi[k + 1] = Ae @ Psi[k]
        Psi[k + 1][:, k] = De
    for arr in (Phi, Gam, Psi):
        arr.flags.writeable = False
    return Phi, Gam, Psi


def _scenario_trajectory(forecast: PredecessorForecast, node: int, t_s: float):
    """Offset velocities, positions and accelerations of one scenario."""
    if node == 0:
        return forecast.velocities, forecast.positions, forecast.accelerations
    offset = node * GH_OFFSET * forecast.std
    velocities = forecast.velocities + offset
    dx = np.concatenate([[0.0], np.cumsum(0.5 * (offset[1:] + offset[:-1]) * t_s)])
    positions = forecast.positions + dx
    d_off = np.diff(offset) / t_s
    d_off = np.concatenate([d_off, d_off[-1:]]) if d_off.size else np.zeros(1)
    return velocities, positions, forecast.accelerations + d_off


def _pad(values: np.ndarray, N: int) -> np.ndarray:
    if values.size >= N:
        return values[:N]
    return np.concatenate([values, np.full(N - values.size, values[-1])])


class _ScenarioProblem:
    """Cost and mode-independent constraints for one (state, scenario) pair.

    The cost does not depend on the mode sequence, so it is assembled once and
    shared by every candidate; only the mode rows and the input rows change.
    """

    def __init__(self, scenario, state0, u_prev, forecasts, config, params):
        N, t_s = config.N, config.t_s
        self.N = N
        self.config = config
        self.params = params
        self.u_prev = float(u_prev)
        Phi, Gam, Psi = _prediction_matrices(params, t_s, N)
        self.Gam = Gam

        nearest = forecasts[0]
        v_near, x_near, a_near = _scenario_trajectory(nearest, scenario.node, t_s)
        a_pred = _pad(a_near, N)
        z0 = np.array([state0.delta_d, state0.delta_v, state0.a, state0.v, 0.0])
        self.free = Phi @ z0 + Psi @ a_pred  # (N+1, 5)

        H = np.zeros((N, N))
        g = np.zeros(N)
        c0 = 0.0
        stages = range(N)
        Q = config.Q_matrix
        R = np.asarray(config.R_ref, dtype=float)
        for k in stages:
            M = Gam[k][:3]
            e = self.free[k][:3] - R
            QM = Q @ M
            H += 2.0 * M.T @ QM
            g += 2.0 * e @ QM
            c0 += float(e @ Q @ e)

        # look-ahead terms against each predecessor i = n - m, m = 1..r_eff
        r_eff = min(config.r, len(forecasts))
        c_d, c_v = config.lookahead_coefficients(r_eff)
        trajectories = [(v_near, x_near)] + [(f.velocities, f.positions) for f in forecasts[1:r_eff]]
        spacing = params.d_s + params.l_v
        for m in range(1, r_eff + 1):
            v_i, x_i = trajectories[m - 1]
            v_i = _pad(v_i, N)
            x_i = _pad(x_i, N)
            for k in stages:
                # vehicles strictly between predecessor i and the ego vehicle
                between = sum(params.tau * _pad(trajectories[j - 1][0], N)[k] + spacing for j in range(1, m))
                const = x_i[k] - state0.x - between - spacing
                row = -(Gam[k][_X] + params.tau * Gam[k][_V])
                c = const - (self.free[k][_X] + params.tau * self.free[k][_V])
                H += 2.0 * c_d[m - 1] * np.outer(row, row)
                g += 2.0 * c_d[m - 1] * c * row
                c0 += c_d[m - 1] * c * c
                row_v = -Gam[k][_V]
                cv = v_i[k] - self.free[k][_V]
                H += 2.0 * c_v[m - 1] * np.outer(row_v, row_v)
                g += 2.0 * c_v[m - 1] * cv * row_v
                c0 += c_v[m - 1] * cv * cv

        H += 2.0 * config.input_weight * np.eye(N)
        self.H = 0.5 * (H + H.T)
        self.g = g
        self.c0 = c0

        # state rows shared by all candidates: a(k), v(k) for k = 1..N
        rows, rhs = [], []
        for k in range(1, N + 1):
            ga = Gam[k][_A]
            fa = self.free[k][_A]
            rows += [ga, -ga]
            rhs += [params.a_max - fa, fa - params.a_min]
            rows.append(Gam[k][_V])
            rhs.append(params.v_max - self.free[k][_V])
        self.state_rows = np.array(rows)
        self.state_rhs = np.array(rhs)
        if config.stopping_constraint:
            self.stop_rows, self.stop_rhs = self._stopping_rows(u_prev, a_pred)
        else:
            self.stop_rows, self.stop_rhs = np.empty((0, N)), np.empty(0)
        self.dd_rows = np.array([Gam[k][_DD] for k in range(N)])
        self.dd_free = self.free[:N, _DD]

    def _stopping_rows(self, u_prev, a_pred):
        """Linearised stopping condition for the state after each input.

        If the predecessor starts its hardest comfort-limited stop at step
        ``k``, the ego vehicle doing the same must come to rest behind it.
        The ego stopping distance is linearised around the trajectory that
        holds ``u_prev``; the predecessor's velocity ``v + dv`` does not
        depend on the inputs, so its stopping distance is a constant.
        """
        N, p, Gam, free = self.N, self.params, self.Gam, self.free
        ref = free + Gam @ np.full(N, float(u_prev))
        k = np.arange(1, N + 1)
        v_ref, a_ref = ref[k, _V], ref[k, _A]
        S_ref, g_v, g_a = stopping_distance(v_ref, a_ref, p)
        v_p = free[k, _V] + free[k, _DV]
        a_p = np.minimum(a_pred[np.minimum(k, N - 1)], 0.0)
        S_p = stopping_distance(v_p, a_p, p)[0]
        G_v, G_a, G_dd = Gam[k, _V], Gam[k, _A], Gam[k, _DD]
        rows = g_v[:, None] * G_v + g_a[:, None] * G_a - G_dd - p.tau * G_v
        rhs = (S_p - self.config.stopping_margin - S_ref + g_v * (v_ref - free[k, _V]) + g_a * (a_ref - free[k, _A])
               + free[k, _DD] + p.tau * free[k, _V] + p.d_s)
        return rows, rhs

    def constraints(self, modes) -> tuple[np.ndarray, np.ndarray]:
        N, p, cfg = self.N, self.params, self.config
        t_s = cfg.t_s
        rows, rhs = [], []
        eye = np.eye(N)
        for k, delta in enumerate(modes):
            e = eye[k]
            if delta:
                rows += [e, -e]
                rhs += [p.u_min + EQUALITY_SLACK, -p.u_min + EQUALITY_SLACK]
            else:
                rows += [e, -e]
                rhs += [p.u_max, -p.u_min]
            # the comfort limit holds in both modes
            prev = eye[k - 1] if k > 0 else np.zeros(N)
            shift = 0.0 if k > 0 else self.u_prev
            rows += [e - prev, prev - e]
            rhs += [t_s * p.u_max + shift, -t_s * p.u_min - shift]
        # mode consistency, big-M form: dd + d_lower <= M (1 - delta), dd + d_lower >= eps - M delta
        for k, delta in enumerate(modes):
            row = self.dd_rows[k]
            free = self.dd_free[k] + p.d_lower
            rows += [row, -row]
            rhs += [cfg.big_m * (1 - delta) - free, free - cfg.eps + cfg.big_m * delta]
        G = np.vstack([np.array(rows), self.state_rows])
        h = np.concatenate([np.array(rhs), self.state_rhs])
        # stopping rows only after free-following inputs; emergency inputs are already the hardest stop
        free_steps = [k for k, delta in enumerate(modes) if not delta]
        if self.stop_rows.shape[0] and free_steps:
            G = np.vstack([G, self.stop_rows[free_steps]])
            h = np.concatenate([h, self.stop_rhs[free_steps]])
        return G, h

    def qp(self, modes) -> QuadraticProgram:
        G, h = self.constraints(modes)
        return QuadraticProgram(self.H, self.g, G, h, self.c0)

    def feasible_by_interval(self, sequences: np.ndarray) -> np.ndarray:
        """Cheap necessary condition for each mode sequence (rows of 0/1).

        Bounds every input by propagating the comfort limits (inputs under
        emergency are pinned to ``u_min``, which must be reachable from the
        previous step), then checks whether each
        predicted gap error can land on the side its mode demands.
        """
        p, t_s = self.params, self.config.t_s
        S, N = sequences.shape
        lo = np.empty((S, N))
        hi = np.empty((S, N))
        prev_lo = np.full(S, self.u_prev)
        prev_hi = np.full(S, self.u_prev)
        reachable = np.ones(S, dtype=bool)
        for k in range(N):
            em = sequences[:, k] == 1
            lo_k = np.maximum(p.u_min, prev_lo + t_s * p.u_min)
            hi_k = np.minimum(p.u_max, prev_hi + t_s * p.u_max)
            reachable &= ~em | (lo_k <= p.u_min + 1e-9)
            lo[:, k] = np.where(em, p.u_min, lo_k)
            hi[:, k] = np.where(em, p.u_min, hi_k)
            prev_lo, prev_hi = lo[:, k], hi[:, k]
        pos = np.maximum(self.dd_rows, 0.0)
        neg = np.minimum(self.dd_rows, 0.0)
        dd_min = self.dd_free + lo @ pos.T + hi @ neg.T
        dd_max = self.dd_free + hi @ pos.T + lo @ neg.T
        need_em = sequences == 1
        ok_em = dd_min + p.d_lower <= 1e-9
        ok_free = dd_max + p.d_lower >= self.config.eps - 1e-9
        return reachable & np.all(np.where(need_em, ok_em, ok_free), axis=1)

    def warm_start(self, modes) -> np.ndarray:
        u = np.empty(self.N)
        prev = self.u_prev
        for k, delta in enumerate(modes):
            u[k] = self.params.u_min if delta else prev
            prev = u[k]
        return u


def build_qp(mode_seq, scenario: Scenario, state0: VehicleState, u_prev: float, forecasts, config: MpcConfig,
             params: VehicleParams) -> QuadraticProgram:
    """Condensed QP over the inputs ``u(0..N-1)`` for one mode sequence and scenario."""
    if not forecasts:
        raise ValueError("at least the nearest predecessor forecast is required")
    if len(mode_seq) != config.N:
        raise ValueError("mode sequence length must equal N")
    return _ScenarioProblem(scenario, state0, u_prev, forecasts, config, params).qp(tuple(mode_seq))


def rollout(state0: VehicleState, u: np.ndarray, a_pred: np.ndarray, config: MpcConfig,
            params: VehicleParams) -> np.ndarray:
    """Predicted extended states ``[dd, dv, a, v, x]`` for ``k = 0..N``."""
    N = config.N
    Phi, Gam, Psi = _prediction_matrices(params, config.t_s, N)
    z0 = np.array([state0.delta_d, state0.delta_v, state0.a, state0.v, 0.0])
    traj = Phi @ z0 + Gam @ np.asarray(u, dtype=float) + Psi @ _pad(np.asarray(a_pred, dtype=float), N)
    traj[:, _X] += state0.x
    return traj


def _sort_key(objective, modes, node):
    return (objective, sum(modes), modes, node)


def _fallback(state0, u_prev, forecasts, config, params, diagnostics) -> SmpcResult:
    t_s = config.t_s
    u = np.empty(config.N)
    prev = u_prev
    for k in range(config.N):
        prev = max(params.u_min, prev + t_s * params.u_min)
        u[k] = prev
    a_pred = forecasts[0].accelerations if forecasts else np.zeros(config.N)
    traj = rollout(state0, u, a_pred, config, params)
    LOG.debug("all SMPC candidates infeasible; braking at the comfort limit")
    diagnostics["fallback"] = True
    return SmpcResult(
        u0=float(u[0]),
        planned_velocities=traj[1:, _V].copy(),
        planned_states=traj,
        mode0=Mode.EMERGENCY_BRAKING,
        mode_sequence=(1,) * config.N,
        scenario=None,
        objective=math.inf,
        diagnostics=diagnostics,
    )


def solve_smpc(state0: VehicleState, u_prev: float, forecasts, config: MpcConfig,
               params: VehicleParams, prune: bool = True) -> SmpcResult:
    """Exact minimiser over all mode sequences and surviving scenarios.

    The total cost of a candidate is its QP optimum plus ``-q ln(pi(w))``.
    Ties are broken by fewer emergency steps, then the lexicographically
    smaller mode sequence, then scenario node order ``-1, 0, +1``. With
    ``prune=True`` candidates are skipped only when an interval test proves
    them infeasible or their probability cost alone already exceeds the
    incumbent, so the arg-min is unchanged.
    """
    if not forecasts:
        raise ValueError("solve_smpc needs the nearest predecessor forecast")
    sequences = enumerate_candidates(config)
    seq_array = np.array(sequences, dtype=int)
    scenarios = build_scenarios(forecasts[0], config)
    diagnostics = {"qp_solved": 0, "interval_pruned": 0, "bound_pruned": 0, "infeasible": 0}

    best = None
    best_key = None
    # cheapest probability cost first so the bound prunes as much as possible
    for scenario in sorted(scenarios, key=lambda s: (-s.log_prob, s.node)):
        prob_cost = -config.q * scenario.log_prob
        if prune and best_key is not None and prob_cost > best_key[0]:
            diagnostics["bound_pruned"] += len(sequences)
            continue
        problem = _ScenarioProblem(scenario, state0, u_prev, forecasts, config, params)
        mask = problem.feasible_by_interval(seq_array) if prune else np.ones(len(sequences), bool)
        diagnostics["interval_pruned"] += int(np.sum(~mask))
        for idx in np.flatnonzero(mask):
            modes = sequences[idx]
            if prune and best_key is not None and prob_cost > best_key[0]:
                diagnostics["bound_pruned"] += 1
                continue
            sol = qpsolver.solve(problem.qp(modes), tol=config.qp_tol, x0=problem.warm_start(modes))
            diagnostics["qp_solved"] += 1
            if sol.status is not QpStatus.OPTIMAL:
                diagnostics["infeasible"] += 1
                continue
            key = _sort_key(sol.objective + prob_cost, modes, scenario.node)
            if best_key is None or key < best_key:
                best_key = key
                best = (sol, modes, scenario, problem)

    if best is None:
        return _fallback(state0, u_prev, forecasts, config, params, diagnostics)

    sol, modes, scenario, problem = best
    u = sol.x.copy()
    for k, delta in enumerate(modes):
        if delta:
            u[k] = params.u_min
    traj = problem.free + problem.Gam @ u
    traj[:, _X] += state0.x
    return SmpcResult(
        u0=float(np.clip(u[0], params.u_min, params.u_max)),
        planned_velocities=traj[1:, _V].copy(),
        planned_states=traj,
        mode0=Mode(modes[0]),
        mode_sequence=modes,
        scenario=scenario,
        objective=best_key[0],
        diagnostics=diagnostics,
    )


def solve_leader(state0: VehicleState, u_prev: float, v_ref, config: MpcConfig,
                 params: VehicleParams) -> SmpcResult:
    """Reference tracking for the platoon leader.

    Minimises ``sum_k (v(k) - v_ref(k))^2`` over ``k = 1..N`` plus the input
    weight, under the acceleration, input, speed and comfort limits.
    ``v_ref`` holds the desired velocity at steps ``1..N``.
    """
    N, t_s = config.N, config.t_s
    Phi, Gam, Psi = _prediction_matrices(params, t_s, N)
    z0 = np.array([0.0, 0.0, state0.a, state0.v, 0.0])
    free = Phi @ z0
    v_ref = np.asarray(v_ref, dtype=float)
    rows_v = Gam[1:, _V]
    err = free[1:, _V] - v_ref
    H = 2.0 * rows_v.T @ rows_v + 2.0 * config.input_weight * np.eye(N)
    g = 2.0 * rows_v.T @ err
    c0 = float(err @ err)

    eye = np.eye(N)
    rows, rhs = [], []
    for k in range(N):
        e = eye[k]
        prev = eye[k - 1] if k > 0 else np.zeros(N)
        shift = 0.0 if k > 0 else float(u_prev)
        rows += [e, -e, e - prev, prev - e]
        rhs += [params.u_max, -params.u_min, t_s * params.u_max + shift, -t_s * params.u_min - shift]
    for k in range(1, N + 1):
        rows += [Gam[k][_A], -Gam[k][_A], Gam[k][_V]]
        rhs += [params.a_max - free[k][_A], free[k][_A] - params.a_min, params.v_max - free[k][_V]]
    problem = QuadraticProgram(H, g, np.array(rows), np.array(rhs), c0)
    sol = qpsolver.solve(problem, tol=config.qp_tol, x0=np.full(N, float(u_prev)))
    diagnostics = {"qp_solved": 1}
    if sol.status is not QpStatus.OPTIMAL:
        return _fallback(state0, u_prev, [], config, params, diagnostics)
    traj = free + Gam @ sol.x
    traj[:, _X] += state0.x
    return SmpcResult(
        u0=float(np.clip(sol.x[0], params.u_min, params.u_max)),
        planned_velocities=traj[1:, _V].copy(),
        planned_states=traj,
        mode0=Mode.FREE_FOLLOWING,
        mode_sequence=(0,) * N,
        scenario=None,
        objective=sol.objective,
        diagnostics=diagnostics,
    )
