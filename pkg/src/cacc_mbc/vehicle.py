"""Longitudinal vehicle model in gap-error coordinates.

Each follower is described by ``S = [dd, dv, a]`` where ``dd`` is the gap
error against the constant time-headway policy, ``dv`` the velocity of the
predecessor minus the own velocity, and ``a`` the own acceleration. The
absolute position/velocity are carried alongside so that safety metrics can
always be evaluated on ground truth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mode",
    "VehicleParams",
    "VehicleState",
    "gap",
    "desired_gap",
    "continuous_matrices",
    "discrete_matrices",
    "step",
    "check_hard",
    "comfort_bounds",
    "emergency_indicator",
    "stopping_distance",
]

SLACK = 1e-9


class Mode(enum.IntEnum):
    FREE_FOLLOWING = 0
    EMERGENCY_BRAKING = 1


@dataclass(frozen=True)
class VehicleParams:
    """Homogeneous vehicle parameters; defaults are the simulated platoon's."""

    tau: float = 0.6
    d_s: float = 2.0
    l_v: float = 5.0
    f: float = 10.0
    a_min: float = -4.0
    a_max: float = 3.0
    u_min: float = -4.0
    u_max: float = 3.0
    v_max: float = 35.0
    d_lower: float = 0.5

    def __post_init__(self):
        if self.tau <= 0 or self.f <= 0:
            raise ValueError("tau and f must be positive")
        if not self.a_min < 0 < self.a_max:
            raise ValueError("acceleration bounds must bracket zero")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        if self.d_lower <= 0:
            raise ValueError("d_lower must be positive")


@dataclass(frozen=True)
class VehicleState:
    delta_d: float
    delta_v: float
    a: float
    x: float = 0.0
    v: float = 0.0

    @property
    def error_vector(self) -> np.ndarray:
        return np.array([self.delta_d, self.delta_v, self.a])


def gap(x_pred: float, x_ego: float, l_v: float) -> float:
    """Bumper-to-bumper distance to the predecessor; negative means overlap."""
    return x_pred - x_ego - l_v


def desired_gap(v: float, params: VehicleParams):
    """Constant time-headway spacing ``tau * v + d_s``."""
    return params.tau * v + params.d_s


def continuous_matrices(params: VehicleParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(A, B, D)`` of ``S' = A S + B u + D a_pred``."""
    A = np.array(
        [
            [0.0, 1.0, -params.tau],
            [0.0, 0.0, -1.0],
            [0.0, 0.0, -params.f],
        ]
    )
    B = np.array([[0.0], [0.0], [params.f]])
    D = np.array([[0.0], [1.0], [0.0]])
    return A, B, D


def discrete_matrices(params: VehicleParams, t_s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward-Euler discretization ``(I + t_s A, t_s B, t_s D)``."""
    A, B, D = continuous_matrices(params)
    return np.eye(3) + t_s * A, t_s * B, t_s * D


def step(state: VehicleState, u: float, a_pred: float, t_s: float, params: VehicleParams) -> VehicleState:
    """Advance one sample with the forward-Euler model.

    ``a_pred`` is the predecessor acceleration used for the ``dv`` channel
    (zero for the leader). The absolute kinematics advance with the same
    first-order rule; velocity is not allowed to go negative, and a stopped
    vehicle does not keep a negative acceleration.
    """
    if t_s <= 0:
        raise ValueError("t_s must be positive")
    dd = state.delta_d + t_s * (state.delta_v - params.tau * state.a)
    dv = state.delta_v + t_s * (a_pred - state.a)
    a = state.a + t_s * params.f * (u - state.a)
    x = state.x + t_s * state.v
    v = state.v + t_s * state.a
    if v < 0.0:
        v = 0.0
        a = max(a, 0.0)
    return VehicleState(dd, dv, a, x, v)


def check_hard(state: VehicleState, u: float, params: VehicleParams, d: float | None = None) -> list[str]:
    """Names of violated hard constraints (bounds on a, u, v and positive gap).

    ``d`` is the ground-truth gap; when omitted it is reconstructed from the
    gap error and the spacing policy.
    """
    violations = []
    if state.a < params.a_min - SLACK or state.a > params.a_max + SLACK:
        violations.append("acceleration")
    if u < params.u_min - SLACK or u > params.u_max + SLACK:
        violations.append("input")
    if state.v > params.v_max + SLACK:
        violations.append("speed")
    if d is None:
        d = state.delta_d + desired_gap(state.v, params)
    if d <= 0.0:
        violations.append("collision")
    return violations


def comfort_bounds(u_prev: float, t_s: float, params: VehicleParams) -> tuple[float, float]:
    """Admissible range for the next input given the previous one."""
    lo = max(params.u_min, u_prev + t_s * params.u_min)
    hi = min(params.u_max, u_prev + t_s * params.u_max)
    return lo, hi


def emergency_indicator(delta_d: float, d_lower: float) -> Mode:
    if delta_d + d_lower <= 0.0:
        return Mode.EMERGENCY_BRAKING
    return Mode.FREE_FOLLOWING


def stopping_distance(v, a, params: VehicleParams):
    """Distance to standstill under the hardest comfort-limited stop.

    The acceleration ramps from ``a`` down to the braking limit at the
    comfort jerk ``-u_min`` (per second), then stays there. Continuous-time
    kinematics; works elementwise on arrays. Returns ``(S, dS/dv, dS/da)``.
    """
    v = np.maximum(np.asarray(v, dtype=float), 0.0)
    b = -max(params.a_min, params.u_min)
    j = -params.u_min
    a = np.clip(np.asarray(a, dtype=float), -b, None)
    T = (a + b) / j
    v_T = v + a * T - 0.5 * j * T**2
    ramp_only = v_T <= 0.0
    # stops before the braking limit is reached
    t_stop = (a + np.sqrt(np.maximum(a**2 + 2.0 * j * v, 0.0))) / j
    S_ramp = v * t_stop + 0.5 * a * t_stop**2 - j * t_stop**3 / 6.0
    v_T = np.maximum(v_T, 0.0)
    S_full = v * T + 0.5 * a * T**2 - j * T**3 / 6.0 + v_T**2 / (2.0 * b)
    S = np.where(ramp_only, S_ramp, S_full)
    dS_dv = np.where(ramp_only, t_stop, T + v_T / b)
    dS_da = np.where(ramp_only, 0.5 * t_stop**2, 0.5 * T**2 + v_T * T / b)
    return S, dS_dv, dS_da
