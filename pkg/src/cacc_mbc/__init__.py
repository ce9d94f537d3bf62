"""Platoon control with model-based communication under packet loss.

Modules
-------
numerics
    Cholesky helpers and a nonlinear conjugate-gradient minimiser.
gp
    Gaussian-process velocity model with leave-one-out hyperparameter fitting.
vehicle
    Longitudinal vehicle model in gap-error coordinates.
qp
    Dense active-set quadratic programming.
smpc
    Hybrid stochastic MPC solved by exhaustive mode enumeration.
comms
    Broadcast messages, lossy links and receiver-side prediction.
sim
    Scenario runner, metrics and sweeps.
cli
    Command-line entry point.
"""

__version__ = "0.1.0"
