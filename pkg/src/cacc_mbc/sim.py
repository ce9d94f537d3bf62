"""Platoon scenario runner, metrics and multi-trial sweeps.

One tick of the loop, for all vehicles synchronously:

1. each vehicle fits its GP to its own last five velocity samples and forms
   a broadcast from the plan it solved on the previous tick;
2. every link draws its loss outcome and each follower refreshes its view
   of its ``r`` nearest predecessors (planned velocities on delivery, GP
   prediction on loss);
3. the leader tracks its speed profile, followers solve the hybrid SMPC;
4. first inputs are applied and the ground-truth kinematics advance.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gp
from .comms import ChannelConfig, LossChannel, MbcMessage, PacketLog, PredecessorStore
from .smpc import MpcConfig, SmpcResult, solve_leader, solve_smpc
from .vehicle import Mode, VehicleParams, VehicleState, desired_gap, step

__all__ = [
    "ConfigError",
    "EmptySample",
    "ScenarioConfig",
    "ScenarioResult",
    "leader_reference",
    "run_scenario",
    "prediction_error_stats",
    "trial_seeds",
    "run_sweep",
]

LOG = logging.getLogger(__name__)

DEFAULT_PROFILE = ((0.0, 27.0), (15.0, 0.0), (30.0, 25.0))
PREDICTION_STEPS = 7


class ConfigError(ValueError):
    pass


class EmptySample(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_vehicles: int = 10
    duration_s: float = 60.0
    t_s: float = 0.1
    r: int = 1
    per: float = 0.0
    trial_seed: int = 0
    cruise_speed: float = 27.0
    leader_u_min: float | None = -3.0
    gap_source: str = "sensor"
    leader_profile: tuple = DEFAULT_PROFILE
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    log_packets: bool = False
    record_predictions: bool = True

    def __post_init__(self):
        if self.n_vehicles < 2:
            raise ConfigError("a platoon needs at least two vehicles")
        if not self.duration_s > 0:
            raise ConfigError("duration must be positive")
        if not self.t_s > 0:
            raise ConfigError("sampling time must be positive")
        if abs(self.mpc.t_s - self.t_s) > 1e-12:
            raise ConfigError("MPC sampling time must equal the simulation step")
        if self.r < 1:
            raise ConfigError("look-ahead r must be at least 1")
        if not 0.0 <= self.per <= 1.0:
            raise ConfigError("per must lie in [0, 1]")
        if self.gap_source not in ("sensor", "forecast"):
            raise ConfigError("gap_source must be 'sensor' or 'forecast'")
        if self.leader_u_min is not None and not self.vehicle.u_min <= self.leader_u_min < 0:
            raise ConfigError("leader_u_min must lie in [u_min, 0)")
        if not self.leader_profile or self.leader_profile[0][0] > 0:
            raise ConfigError("leader profile must start at t = 0")
        starts = [p[0] for p in self.leader_profile]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("leader profile breakpoints must increase")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.t_s))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        vehicle = VehicleParams(**data.pop("vehicle", {}))
        mpc_data = dict(data.pop("mpc", {}))
        for key in ("Q", "R_ref", "c_d", "c_v"):
            if mpc_data.get(key) is not None:
                mpc_data[key] = _tupled(mpc_data[key])
        mpc = MpcConfig(**mpc_data)
        if "leader_profile" in data:
            data["leader_profile"] = _tupled(data["leader_profile"])
        return cls(vehicle=vehicle, mpc=mpc, **data)


def _tupled(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupled(v) for v in value)
    return value


def leader_reference(t: float, profile=DEFAULT_PROFILE) -> float:
    """Desired leader speed: piecewise constant, each piece closed on the left."""
    if t < 0:
        raise ValueError("time must be non-negative")
    speed = profile[0][1]
    for start, value in profile:
        if t >= start:
            speed = value
    return float(speed)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    time: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    u: np.ndarray
    gap: np.ndarray
    desired_gap: np.ndarray
    mode: np.ndarray
    received: np.ndarray
    collision: bool
    collision_info: dict | None
    prediction_samples: dict
    packet_log: PacketLog | None = None

    @property
    def n_ticks_recorded(self) -> int:
        return self.time.size

    @property
    def emergency_s(self) -> np.ndarray:
        return self.config.t_s * np.sum(self.mode == Mode.EMERGENCY_BRAKING, axis=0)

    @property
    def emergency_total_s(self) -> float:
        return float(np.sum(self.emergency_s))

    @property
    def min_gap(self) -> np.ndarray:
        out = np.full(self.config.n_vehicles, np.nan)
        out[1:] = np.min(self.gap[:, 1:], axis=0)
        return out

    def metrics(self) -> dict:
        em = self.emergency_s
        return {
            "emergency_s": em.tolist(),
            "emergency_total_s": float(np.sum(em)),
            "emergency_mean_per_vehicle_s": float(np.mean(em[1:])),
            "min_gap_m": [None if math.isnan(g) else float(g) for g in self.min_gap],
            "platoon_min_gap_m": float(np.nanmin(self.min_gap)),
            "collision": self.collision,
            "collision_info": self.collision_info,
            "ticks": int(self.n_ticks_recorded),
        }


class _Vehicle:
    """Mutable per-vehicle simulation state."""

    def __init__(self, index, x, v, t0, t_s, horizon):
        self.index = index
        self.state = VehicleState(0.0, 0.0, 0.0, x, v)
        self.u_prev = 0.0
        times = t0 + t_s * np.arange(-4, 1)
        self.hist_t = deque(times.tolist(), maxlen=5)
        self.hist_v = deque([v] * 5, maxlen=5)
        self.hyper = gp.DEFAULT_HYPER
        self.plan_velocities = np.full(horizon, v)
        self.store = PredecessorStore(horizon=horizon, t_s=t_s)

    def observe(self, t):
        if abs(self.hist_t[-1] - t) > 1e-9:
            self.hist_t.append(t)
            self.hist_v.append(self.state.v)

    def history(self) -> gp.VelocityHistory:
        return gp.VelocityHistory(np.array(self.hist_t), np.array(self.hist_v))


def _initial_positions(cfg: ScenarioConfig) -> np.ndarray:
    spacing = desired_gap(cfg.cruise_speed, cfg.vehicle) + cfg.vehicle.l_v
    return -spacing * np.arange(cfg.n_vehicles)


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Simulate one platoon scenario; a collision stops the run and is flagged."""
    cfg = config
    params = cfg.vehicle
    leader_params = params if cfg.leader_u_min is None else dataclasses.replace(params, u_min=cfg.leader_u_min)
    mpc = dataclasses.replace(cfg.mpc, r=cfg.r)
    N = mpc.N
    t_s = cfg.t_s
    n_veh = cfg.n_vehicles
    n_ticks = cfg.n_ticks
    channel = LossChannel(ChannelConfig(per=cfg.per, rate=1.0 / t_s, seed=cfg.trial_seed))
    packet_log = PacketLog() if cfg.log_packets else None

    vehicles = [_Vehicle(i, x, cfg.cruise_speed, 0.0, t_s, N) for i, x in enumerate(_initial_positions(cfg))]

    shape = (n_ticks + 1, n_veh)
    rec = {name: np.full(shape, np.nan) for name in ("x", "v", "a", "u", "gap", "desired_gap")}
    rec_mode = np.zeros(shape, dtype=np.int8)
    rec_received = np.zeros(shape, dtype=np.int16)
    samples = {"mpc": [], "gp": []}
    collision_info = None
    last_tick = n_ticks

    for tick in range(n_ticks + 1):
        t = tick * t_s

        # 1. model fitting and broadcast content
        messages = []
        for veh in vehicles:
            veh.observe(t)
            history = veh.history()
            veh.hyper = gp.fit(history, veh.hyper)
            messages.append(
                MbcMessage(
                    sender=veh.index,
                    send_time=t,
                    position=veh.state.x,
                    acceleration=veh.state.a,
                    velocity_history=history,
                    gp_params=veh.hyper,
                    mpc_velocities=veh.plan_velocities,
                )
            )

        # 2. channel and predecessor estimation
        forecasts = [[] for _ in range(n_veh)]
        gp_cache = {}
        for n in range(1, n_veh):
            for i in range(n - 1, max(-1, n - 1 - cfg.r), -1):
                msg = messages[i]
                delivered = channel.transmit(msg, n) or tick == 0
                if packet_log is not None:
                    packet_log.record(tick, t, i, n, delivered)
                store = vehicles[n].store
                if delivered:
                    forecasts[n].append(store.on_receive(msg, t))
                    rec_received[tick, n] += 1
                    if cfg.record_predictions:
                        _record_prediction(samples, msg, tick, t, t_s, gp_cache)
                else:
                    forecasts[n].append(store.on_loss(i, t))

        # 3. control
        results: list[SmpcResult] = []
        for veh in vehicles:
            n = veh.index
            s = veh.state
            if n == 0:
                v_ref = [leader_reference(t + k * t_s, cfg.leader_profile) for k in range(1, N + 1)]
                res = solve_leader(s, veh.u_prev, v_ref, mpc, leader_params)
            else:
                if cfg.gap_source == "sensor":
                    ahead = vehicles[n - 1].state
                    x_ahead, v_ahead = ahead.x, ahead.v
                else:
                    x_ahead, v_ahead = forecasts[n][0].positions[0], forecasts[n][0].velocities[0]
                dd = (x_ahead - s.x - params.l_v) - desired_gap(s.v, params)
                dv = v_ahead - s.v
                state0 = VehicleState(dd, dv, s.a, s.x, s.v)
                veh.state = state0
                res = solve_smpc(state0, veh.u_prev, forecasts[n], mpc, params)
            results.append(res)

        # 4. record ground truth, then advance
        for veh, res in zip(vehicles, results):
            n = veh.index
            s = veh.state
            rec["x"][tick, n] = s.x
            rec["v"][tick, n] = s.v
            rec["a"][tick, n] = s.a
            rec["u"][tick, n] = res.u0
            rec_mode[tick, n] = int(res.mode0)
            if n > 0:
                d = vehicles[n - 1].state.x - s.x - params.l_v
                rec["gap"][tick, n] = d
                rec["desired_gap"][tick, n] = desired_gap(s.v, params)
                if d <= 0.0 and collision_info is None:
                    collision_info = {"tick": tick, "time_s": t, "vehicle": n, "gap_m": float(d)}
        if collision_info is not None:
            LOG.warning("collision at t=%.1f s, vehicle %d", collision_info["time_s"], collision_info["vehicle"])
            last_tick = tick
            break
        if tick == n_ticks:
            break

        accelerations = [veh.state.a for veh in vehicles]
        for veh, res in zip(vehicles, results):
            a_pred = 0.0 if veh.index == 0 else accelerations[veh.index - 1]
            veh.state = step(veh.state, res.u0, a_pred, t_s, params)
            veh.u_prev = res.u0
            veh.plan_velocities = res.planned_velocities

    rows = slice(0, last_tick + 1)
    return ScenarioResult(
        config=cfg,
        time=t_s * np.arange(last_tick + 1),
        x=rec["x"][rows],
        v=rec["v"][rows],
        a=rec["a"][rows],
        u=rec["u"][rows],
        gap=rec["gap"][rows],
        desired_gap=rec["desired_gap"][rows],
        mode=rec_mode[rows],
        received=rec_received[rows],
        collision=collision_info is not None,
        collision_info=collision_info,
        prediction_samples=_finalize_samples(samples),
        packet_log=packet_log,
    )


def _record_prediction(samples, msg: MbcMessage, tick: int, t: float, t_s: float, gp_cache: dict) -> None:
    """Log the h-step-ahead velocity predictions (h = 1..7) carried by ``msg``.

    The planned velocities were produced one tick earlier, so entry ``h-1``
    predicts tick ``tick - 1 + h``. The GP is conditioned on samples up to the
    send time and predicts ticks ``tick + h``.
    """
    h = np.arange(1, PREDICTION_STEPS + 1)
    planned = msg.mpc_velocities[:PREDICTION_STEPS]
    if planned.size == PREDICTION_STEPS:
        samples["mpc"].append((msg.sender, tick - 1 + h, planned))
    if msg.sender not in gp_cache:
        gp_cache[msg.sender] = gp.predict(msg.velocity_history, msg.gp_params, t + t_s * h).mean
    samples["gp"].append((msg.sender, tick + h, gp_cache[msg.sender]))


def _finalize_samples(samples) -> dict:
    out = {}
    for source, entries in samples.items():
        if entries:
            out[source] = {
                "sender": np.array([e[0] for e in entries], dtype=int),
                "target_tick": np.array([e[1] for e in entries], dtype=int),
                "predicted": np.array([e[2] for e in entries], dtype=float),
            }
        else:
            out[source] = {
                "sender": np.zeros(0, dtype=int),
                "target_tick": np.zeros((0, PREDICTION_STEPS), dtype=int),
                "predicted": np.zeros((0, PREDICTION_STEPS)),
            }
    return out


def _nearest_rank(values: np.ndarray, pct: float) -> float:
    ordered = np.sort(values)
    rank = max(1, int(math.ceil(pct / 100.0 * ordered.size)))
    return float(ordered[rank - 1])


def prediction_error_stats(result: ScenarioResult) -> dict:
    """Mean and nearest-rank 95th percentile of |v_pred - v_true| per horizon step.

    Returns ``{source: {"mean": array(7), "p95": array(7), "count": array(7)}}``
    for ``source`` in ``("gp", "mpc")``.
    """
    last = result.n_ticks_recorded - 1
    stats = {}
    for source in ("gp", "mpc"):
        entry = result.prediction_samples.get(source)
        if entry is None or entry["predicted"].shape[0] == 0:
            raise EmptySample(f"no {source} prediction samples recorded")
        targets = entry["target_tick"]
        valid = (targets <= last) & (targets >= 0)
        truth = np.where(valid, result.v[np.clip(targets, 0, last), entry["sender"][:, None]], np.nan)
        err = np.abs(entry["predicted"] - truth)
        means, p95, counts = [], [], []
        for h in range(PREDICTION_STEPS):
            col = err[:, h][valid[:, h]]
            if col.size == 0:
                raise EmptySample(f"no {source} samples for horizon step {h + 1}")
            means.append(float(np.mean(col)))
            p95.append(_nearest_rank(col, 95.0))
            counts.append(int(col.size))
        stats[source] = {"mean": np.array(means), "p95": np.array(p95), "count": np.array(counts)}
    return stats


def trial_seeds(base_seed: int, trials: int) -> list[int]:
    """Deterministic per-trial seeds derived from ``base_seed``."""
    state = np.random.SeedSequence(int(base_seed)).generate_state(trials, dtype=np.uint32)
    return [int(s) for s in state]


def _run_cell_trial(config: ScenarioConfig) -> dict:
    res = run_scenario(config)
    return {
        "per": config.per,
        "r": config.r,
        "seed": config.trial_seed,
        "emergency_total_s": res.emergency_total_s,
        "emergency_s": res.emergency_s.tolist(),
        "min_gap_m": float(np.nanmin(res.min_gap)),
        "collision": res.collision,
    }


def summarize_cell(per: float, r: int, trials: list[dict]) -> dict:
    """Mean and population std of the platoon emergency-braking total over trials."""
    em = np.array([t["emergency_total_s"] for t in trials])
    followers = len(trials[0]["emergency_s"]) - 1
    return {
        "per": per,
        "r": r,
        "trials": len(trials),
        "mean_emergency_s": float(np.mean(em)),
        "std_emergency_s": float(np.std(em)),
        "mean_min_gap_m": float(np.mean([t["min_gap_m"] for t in trials])),
        "collision_count": int(sum(bool(t["collision"]) for t in trials)),
        "mean_emergency_per_vehicle_s": float(np.mean(em) / followers),
    }


def run_sweep(pers, rs, trials: int, base: ScenarioConfig | None = None, base_seed: int = 0,
              jobs: int = 1, on_cell=None, cached=None) -> list[dict]:
    """Emergency-braking statistics over a grid of PER and look-ahead values.

    Every cell reuses the same trial seeds, so links that exist in two cells
    see identical loss draws. ``cached`` may map ``(per, r)`` to already
    computed per-trial records (used to resume); ``on_cell`` is called with
    ``(per, r, trial_records)`` once a cell completes.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    base = base or ScenarioConfig()
    seeds = trial_seeds(base_seed, trials)
    cached = cached or {}
    cells = [(float(per), int(r)) for per in pers for r in rs]
    todo = [c for c in cells if c not in cached]
    configs = {
        cell: [dataclasses.replace(base, per=cell[0], r=cell[1], trial_seed=s, record_predictions=False)
               for s in seeds]
        for cell in todo
    }
    results = dict(cached)
    if jobs > 1 and todo:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {cell: pool.map(_run_cell_trial, configs[cell]) for cell in todo}
            for cell in todo:
                results[cell] = list(futures[cell])
                if on_cell:
                    on_cell(cell[0], cell[1], results[cell])
    else:
        for cell in todo:
            results[cell] = [_run_cell_trial(c) for c in configs[cell]]
            if on_cell:
                on_cell(cell[0], cell[1], results[cell])
    return [summarize_cell(per, r, results[(per, r)]) for per, r in cells]
