"""Team-communication bus with seeded loss, latency and staleness filtering."""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .geometry import Point, Pose2D
from .tasks import NegotiationKind, Role, Task

TIME_EPS = 1e-9


class RateExceeded(RuntimeError):
    """A sender broadcast twice within one bus period."""


@dataclass(frozen=True)
class NegotiationPayload:
    kind: NegotiationKind
    to: int
    nonce: int
    # Send time of the Request that opened the exchange; lets the striker
    # derive the requester's decision deadline.
    request_time: float = 0.0


@dataclass(frozen=True)
class TeamMessage:
    sender_id: int
    send_time: float
    task: Task
    robot_pose: Pose2D
    ball_visible: bool = False
    ball_distance: Optional[float] = None
    ball_possession: bool = False
    ball_location: Optional[Point] = None
    active: bool = True
    fallen: bool = False
    negotiation: Optional[NegotiationPayload] = None
    role: Role = Role.FieldPlayer
    clearout: bool = False

    def __post_init__(self) -> None:
        if not self.ball_visible and self.ball_distance is not None:
            raise ValueError("ball_distance must be absent when the ball is not visible")


@dataclass(frozen=True)
class BusConfig:
    period: float = 0.125
    loss_probability: float = 0.0
    latency: float = 0.0
    jitter: float = 0.0
    staleness_horizon: float = 5.0
    beat_aligned_negotiation: bool = False

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("bus period must be positive")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must lie in [0, 1]")
        if self.staleness_horizon <= self.period:
            raise ValueError("staleness_horizon must exceed the period")
        if self.latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be non-negative")


# (op, sender, receiver, message, cause, time)
BusListener = Callable[[str, int, Optional[int], TeamMessage, str, float], None]


@dataclass(order=True)
class _Pending:
    deliver_time: float
    seq: int
    receiver: int = field(compare=False)
    msg: TeamMessage = field(compare=False)
    cause: str = field(compare=False)


class Bus:
    """Broadcast bus for one team.

    Every message is delivered to each other member independently with
    probability ``1 - loss`` at ``send_time + latency``. Receivers see the
    latest message per sender through :meth:`inbox` and consume negotiation
    payloads addressed to them through :meth:`take_negotiation`.
    """

    def __init__(self, config: BusConfig, members: Iterable[int], seed: int, listener: Optional[BusListener] = None):
        self.config = config
        self.members = sorted(members)
        self.rng = random.Random(seed)
        self.listener = listener
        self.link_loss: Dict[Tuple[int, int], float] = {}
        self._pending: List[_Pending] = []
        self._seq = 0
        self._last_slot: Dict[int, int] = {}
        self._latest: Dict[int, Dict[int, TeamMessage]] = {m: {} for m in self.members}
        self._negotiation: Dict[int, List[TeamMessage]] = {m: [] for m in self.members}

    def slot(self, now: float) -> int:
        return int(math.floor(now / self.config.period + TIME_EPS))

    def due(self, sender: int, now: float) -> bool:
        """True when ``sender`` has not broadcast in the current period slot."""
        return self._last_slot.get(sender) != self.slot(now)

    def broadcast(self, msg: TeamMessage, now: float) -> None:
        slot = self.slot(now)
        if self._last_slot.get(msg.sender_id) == slot:
            raise RateExceeded(f"robot {msg.sender_id} broadcast twice in slot {slot}")
        self._last_slot[msg.sender_id] = slot
        self._fan_out(msg, now, "status")

    def send(self, msg: TeamMessage, now: float, cause: str = "event") -> None:
        """Event-driven send (negotiation, egress); not rate limited."""
        self._fan_out(msg, now, cause)

    def _fan_out(self, msg: TeamMessage, now: float, cause: str) -> None:
        if msg.send_time > now + TIME_EPS:
            raise ValueError("message send_time lies in the future")
        listener = self.listener
        for receiver in self.members:
            if receiver == msg.sender_id:
                continue
            loss = self.link_loss.get((msg.sender_id, receiver), self.config.loss_probability)
            if loss > 0.0 and self.rng.random() < loss:
                if listener is not None:
                    listener("drop", msg.sender_id, receiver, msg, cause, now)
                continue
            latency = self.config.latency
            if self.config.jitter > 0.0:
                latency = max(0.0, latency + self.rng.uniform(-self.config.jitter, self.config.jitter))
            self._seq += 1
            heapq.heappush(self._pending, _Pending(msg.send_time + latency, self._seq, receiver, msg, cause))
            if listener is not None:
                listener("send", msg.sender_id, receiver, msg, cause, now)

    def deliver_due(self, now: float) -> None:
        pending = self._pending
        listener = self.listener
        while pending and pending[0].deliver_time <= now + TIME_EPS:
            item = heapq.heappop(pending)
            box = self._latest[item.receiver]
            prev = box.get(item.msg.sender_id)
            if prev is None or prev.send_time <= item.msg.send_time:
                box[item.msg.sender_id] = item.msg
            if item.msg.negotiation is not None and item.msg.negotiation.to == item.receiver:
                self._negotiation[item.receiver].append(item.msg)
            if listener is not None:
                listener("deliver", item.msg.sender_id, item.receiver, item.msg, item.cause, item.deliver_time)

    def inbox(self, receiver: int, now: float) -> List[TeamMessage]:
        """Latest delivered message per sender, fresh ones only, sorted by sender id."""
        self.deliver_due(now)
        horizon = self.config.staleness_horizon
        box = self._latest[receiver]
        return [box[s] for s in sorted(box) if now - box[s].send_time <= horizon + TIME_EPS]

    def take_negotiation(self, receiver: int, now: float) -> List[TeamMessage]:
        """Pop negotiation messages addressed to ``receiver``, ordered by (sender, send_time)."""
        self.deliver_due(now)
        msgs = self._negotiation[receiver]
        self._negotiation[receiver] = []
        return sorted(msgs, key=lambda m: (m.sender_id, m.send_time))

    def pending_count(self) -> int:
        return len(self._pending)
