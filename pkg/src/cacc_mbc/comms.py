"""Model-based communication: message format, lossy broadcast, receiver store.

Every broadcast carries the sender's position, acceleration, its last five
velocity samples with the fitted GP hyperparameters, and the velocities its
MPC planned for the next steps. A receiver uses the planned velocities
whenever a packet arrives and falls back to the GP model of the last packet
while packets are being lost.

Loss model
----------
Each directed link ``(sender, receiver)`` owns a PCG64 stream seeded with
``numpy.random.SeedSequence([trial_seed, sender, receiver])``. The k-th
uniform draw of that stream decides the k-th broadcast on the link: the packet
is lost when the draw is below the packet error rate. Streams of different
links are independent, so adding vehicles or changing the look-ahead does not
alter the loss pattern of any other link, and raising the PER only turns
deliveries into losses (common random numbers across a sweep).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gp
from .gp import GpHyperParams, VelocityHistory
from .smpc import ForecastSource, PredecessorForecast

__all__ = [
    "HISTORY_LENGTH",
    "MPC_LENGTH",
    "MbcMessage",
    "ChannelConfig",
    "LossChannel",
    "NoPriorContact",
    "PredecessorStore",
    "PacketLog",
]

HISTORY_LENGTH = 5
MPC_LENGTH = 7
# sender, send_time, position, acceleration, 5 times, 5 velocities,
# gamma, gamma_noise, 7 planned velocities
_RECORD = struct.Struct("<" + "d" * (4 + 2 * HISTORY_LENGTH + 2 + MPC_LENGTH))


class NoPriorContact(RuntimeError):
    """A loss was reported for a predecessor that never delivered a packet."""


@dataclass(frozen=True)
class MbcMessage:
    sender: int
    send_time: float
    position: float
    acceleration: float
    velocity_history: VelocityHistory
    gp_params: GpHyperParams
    mpc_velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mpc_velocities", np.asarray(self.mpc_velocities, dtype=float).reshape(-1))
        if len(self.velocity_history) != HISTORY_LENGTH:
            raise ValueError(f"velocity history must hold {HISTORY_LENGTH} samples")
        if self.mpc_velocities.size == 0:
            raise ValueError("message needs at least one planned velocity")

    def to_bytes(self) -> bytes:
        """Flat little-endian float64 record (184 bytes), see module docs."""
        if self.mpc_velocities.size != MPC_LENGTH:
            raise ValueError(f"wire format carries exactly {MPC_LENGTH} planned velocities")
        return _RECORD.pack(
            float(self.sender),
            self.send_time,
            self.position,
            self.acceleration,
            *self.velocity_history.times,
            *self.velocity_history.velocities,
            self.gp_params.gamma,
            self.gp_params.gamma_noise,
            *self.mpc_velocities,
        )

    @classmethod
    def from_bytes(cls, payload: bytes) -> "MbcMessage":
        values = _RECORD.unpack(payload)
        h = HISTORY_LENGTH
        times = np.array(values[4:4 + h])
        vels = np.array(values[4 + h:4 + 2 * h])
        gamma, noise = values[4 + 2 * h:6 + 2 * h]
        return cls(
            sender=int(values[0]),
            send_time=values[1],
            position=values[2],
            acceleration=values[3],
            velocity_history=VelocityHistory(times, vels),
            gp_params=GpHyperParams(gamma, noise),
            mpc_velocities=np.array(values[6 + 2 * h:]),
        )


@dataclass(frozen=True)
class ChannelConfig:
    per: float = 0.0
    rate: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.per <= 1.0:
            raise ValueError(f"packet error rate must lie in [0, 1], got {self.per}")
        if self.rate <= 0:
            raise ValueError("broadcast rate must be positive")


class LossChannel:
    """I.i.d. packet erasure channel with one random stream per directed link."""

    def __init__(self, config: ChannelConfig):
        self.config = config
        self._streams: dict[tuple[int, int], np.random.Generator] = {}

    def stream(self, sender: int, receiver: int) -> np.random.Generator:
        key = (sender, receiver)
        if key not in self._streams:
            seq = np.random.SeedSequence([int(self.config.seed), int(sender), int(receiver)])
            self._streams[key] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[key]

    def transmit(self, msg: MbcMessage, receiver: int) -> bool:
        """True when ``msg`` reaches ``receiver``; consumes one draw of the link stream."""
        draw = self.stream(msg.sender, receiver).random()
        return bool(draw >= self.config.per)


def _trapezoid_positions(x0: float, velocities: np.ndarray, t_s: float) -> np.ndarray:
    steps = 0.5 * (velocities[1:] + velocities[:-1]) * t_s
    return x0 + np.concatenate([[0.0], np.cumsum(steps)])


def _finite_difference(velocities: np.ndarray, t_s: float) -> np.ndarray:
    if velocities.size < 2:
        return np.zeros_like(velocities)
    acc = np.diff(velocities) / t_s
    return np.concatenate([acc, acc[-1:]])


@dataclass
class _LinkState:
    message: MbcMessage
    receive_time: float
    gp_params: GpHyperParams
    staleness: int = 0


@dataclass
class PredecessorStore:
    """What one receiving vehicle knows about each of its predecessors."""

    horizon: int = MPC_LENGTH
    t_s: float = 0.1
    links: dict[int, _LinkState] = field(default_factory=dict)

    def on_receive(self, msg: MbcMessage, now: float) -> PredecessorForecast:
        """Store ``msg`` and forecast from the sender's planned velocities."""
        self.links[msg.sender] = _LinkState(msg, now, msg.gp_params, 0)
        v = msg.mpc_velocities
        if v.size < self.horizon:
            v = np.concatenate([v, np.full(self.horizon - v.size, v[-1])])
        v = v[: self.horizon]
        return PredecessorForecast(
            vehicle_id=msg.sender,
            velocities=v,
            positions=_trapezoid_positions(msg.position, v, self.t_s),
            accelerations=_finite_difference(v, self.t_s),
            std=np.zeros(self.horizon),
            source=ForecastSource.RECEIVED_MPC,
        )

    def on_loss(self, sender: int, now: float) -> PredecessorForecast:
        """Forecast ``sender`` from the GP model of its last delivered packet."""
        link = self.links.get(sender)
        if link is None:
            raise NoPriorContact(f"no packet from vehicle {sender} has ever been received")
        link.staleness += 1
        msg = link.message
        query = now + self.t_s * np.arange(self.horizon)
        pred = gp.predict(msg.velocity_history, link.gp_params, query)
        positions = gp.predict_positions(msg.position, msg.send_time, msg.velocity_history, link.gp_params, query)
        return PredecessorForecast(
            vehicle_id=sender,
            velocities=pred.mean,
            positions=positions,
            accelerations=_finite_difference(pred.mean, self.t_s),
            std=pred.std,
            source=ForecastSource.GP_PREDICTED,
        )

    def staleness(self, sender: int) -> int:
        return self.links[sender].staleness


class PacketLog:
    """Optional per-link delivery log, written as CSV."""

    columns = ("tick", "time_s", "sender", "receiver", "delivered")

    def __init__(self):
        self.rows: list[tuple] = []

    def record(self, tick: int, time_s: float, sender: int, receiver: int, delivered: bool) -> None:
        self.rows.append((tick, time_s, sender, receiver, int(delivered)))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for tick, time_s, sender, receiver, delivered in self.rows:
                writer.writerow([tick, repr(float(time_s)), sender, receiver, delivered])

    def delivery_ratio(self) -> float:
        if not self.rows:
            return math.nan
        return sum(r[4] for r in self.rows) / len(self.rows)
