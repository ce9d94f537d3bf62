"""Shared problem generators and frozen solver inputs for the unit and acceptance tests."""

import numpy as np

from cacc_mbc.qp import QuadraticProgram
from cacc_mbc.smpc import ForecastSource, PredecessorForecast
from cacc_mbc.vehicle import VehicleParams, VehicleState


def random_qp(rng, n, m, singular=False):
    M = rng.normal(size=(n, n))
    H = M @ M.T
    if singular and n > 1:
        w, V = np.linalg.eigh(H)
        w[0] = 0.0
        H = V @ np.diag(w) @ V.T
    else:
        H += 0.1 * np.eye(n)
    g = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    # feasible by construction: the box-like rows contain a random interior point
    x_in = rng.normal(size=n)
    h = G @ x_in + rng.uniform(0.1, 2.0, size=m)
    if singular:
        # bound the problem so a flat direction cannot be unbounded
        G = np.vstack([G, np.eye(n), -np.eye(n)])
        h = np.concatenate([h, np.full(2 * n, 10.0) + np.abs(np.concatenate([x_in, -x_in]))])
    return QuadraticProgram(H, g, G, h)


PARAMS = VehicleParams()


def forecast(v0, accel=0.0, x0=50.0, std=0.0, n=7, vehicle_id=0, t_s=0.1):
    k = np.arange(n)
    v = v0 + accel * t_s * k
    x = x0 + v0 * t_s * k + 0.5 * accel * (t_s * k) ** 2
    source = ForecastSource.GP_PREDICTED if std else ForecastSource.RECEIVED_MPC
    return PredecessorForecast(vehicle_id, v, x, np.full(n, accel), np.full(n, std), source)


def follower(dd, dv, a, v, x=0.0):
    return VehicleState(dd, dv, a, x, v)


# (state, u_prev, forecasts) fixtures on a three-step horizon
FIXTURES = {
    "two_candidates": (
        follower(-0.3, -1.0, 0.0, 15.0, x=50.0 - 5.0 - 11.0 + 0.3),
        0.0,
        [forecast(14.0, n=3, std=0.3)],
    ),
    "hard_brake_close": (follower(-0.8, -3.0, -3.7, 20.0), -3.7, [forecast(17.0, accel=-4.0, n=3)]),
    "gp_uncertain": (follower(-0.3, -0.5, -0.5, 15.0), -0.5, [forecast(14.5, accel=-1.0, std=0.4, n=3)]),
    "two_lookahead": (
        follower(0.2, 0.3, 0.2, 25.0),
        0.2,
        [forecast(25.3, n=3, vehicle_id=1), forecast(25.0, x0=90.0, n=3, vehicle_id=0)],
    ),
    "boundary_gap": (follower(-0.45, -1.0, -3.2, 10.0), -3.2, [forecast(9.0, accel=-2.0, std=0.2, n=3)]),
}
