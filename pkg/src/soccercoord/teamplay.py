"""Task manager: desired task, debounce voting, the reassignment handshake,
clear-out coordination and egress handling.

One :class:`TaskManager` runs per robot. It never touches another robot's
state; everything it learns about teammates arrives as :class:`TeamMessage`
records and everything it tells them leaves as negotiation payloads that the
caller puts on the bus.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from .geometry import (
    FieldModel,
    Point,
    Pose2D,
    Region,
    classify_ball_region,
    dist,
    heading_to,
    normalize_angle,
    presence_line_clear,
)
from .netcomms import NegotiationPayload, TeamMessage
from .tasks import NegotiationKind, Role, Task

INF = math.inf


@dataclass(frozen=True)
class TeamplayConfig:
    confirm_cycles: int = 4
    negotiation_timeout: float = 1.0
    alignment_weight: float = 0.5
    staleness_horizon: float = 5.0
    # goalkeeper dive trigger
    dive_speed: float = 1.0
    dive_horizon: float = 1.5
    dive_min_offset: float = 0.3

    def __post_init__(self) -> None:
        if self.confirm_cycles < 1:
            raise ValueError("confirm_cycles must be >= 1")
        if self.negotiation_timeout <= 0:
            raise ValueError("negotiation_timeout must be positive")


class VoteBuffer:
    """Ring of the last ``n`` decisions; confirms only a unanimous ring."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("vote buffer needs n >= 1")
        self.n = n
        self._ring: Deque[object] = deque(maxlen=n)

    def push(self, decision):
        """Return the decision once the last ``n`` pushes agree, else None."""
        if self._ring and self._ring[-1] != decision:
            self._ring.clear()
        self._ring.append(decision)
        if len(self._ring) == self.n:
            return decision
        return None

    def clear(self) -> None:
        self._ring.clear()

    @property
    def streak(self) -> int:
        return len(self._ring)


def vote(buffer: VoteBuffer, decision):
    return buffer.push(decision)


# ---------------------------------------------------------------------------
# Desired task


def possession_cost(pose: Pose2D, ball: Optional[Point], f: FieldModel, weight: float = 0.5) -> float:
    """Distance to the ball plus a penalty for not standing behind it."""
    if ball is None:
        return INF
    d = dist(pose.position, ball)
    if d < 1e-9:
        return 0.0
    approach = heading_to(pose.position, ball)
    shot = heading_to(ball, f.opponent_goal_center)
    return d + weight * abs(normalize_angle(approach - shot))


def message_cost(msg: TeamMessage, f: FieldModel, weight: float = 0.5) -> float:
    if msg.fallen or not msg.active:
        return INF
    return possession_cost(msg.robot_pose, msg.ball_location, f, weight)


@dataclass(frozen=True)
class SelfView:
    """What a robot believes about itself at decision time."""

    id: int
    role: Role
    pose: Pose2D
    ball: Optional[Point] = None
    ball_velocity: Optional[Point] = None
    fallen: bool = False
    active: bool = True

    def cost(self, f: FieldModel, weight: float = 0.5) -> float:
        if self.fallen or not self.active:
            return INF
        return possession_cost(self.pose, self.ball, f, weight)


def better_than(cost_a: float, id_a: int, cost_b: float, id_b: int) -> bool:
    """Strict ordering on (cost, id)."""
    if cost_a != cost_b:
        return cost_a < cost_b
    return id_a < id_b


def field_players(inbox: Iterable[TeamMessage], self_id: int) -> List[TeamMessage]:
    return [m for m in inbox if m.sender_id != self_id and m.role is Role.FieldPlayer and m.active]


def desired_task(me: SelfView, inbox: Sequence[TeamMessage], f: FieldModel, cfg: TeamplayConfig = TeamplayConfig(), clearout_active: bool = False) -> Task:
    if me.role is Role.Goalkeeper:
        return Task.KeepGoal
    if clearout_active:
        return Task.WaitClearOut
    rivals = [m for m in field_players(inbox, me.id) if not m.fallen]
    if not rivals:
        return Task.Attack
    mine = me.cost(f, cfg.alignment_weight)
    for m in rivals:
        if not better_than(mine, me.id, message_cost(m, f, cfg.alignment_weight), m.sender_id):
            return Task.Defend
    return Task.Attack


# ---------------------------------------------------------------------------
# Goalkeeper side


class ClearOutDecision(str, enum.Enum):
    ClearOut = "ClearOut"
    HoldLaterally = "HoldLaterally"
    PassiveGaze = "PassiveGaze"


def fused_ball(own: Optional[Point], inbox: Sequence[TeamMessage]) -> Optional[Point]:
    """Own estimate if any, else the most recent teammate report."""
    if own is not None:
        return own
    seen = [m for m in inbox if m.ball_visible and m.ball_location is not None]
    if not seen:
        return None
    latest = max(seen, key=lambda m: (m.send_time, -m.sender_id))
    return latest.ball_location


def clearout_decision(ball: Optional[Point], teammates: Iterable[Point], f: FieldModel) -> ClearOutDecision:
    if ball is None:
        return ClearOutDecision.HoldLaterally
    region = classify_ball_region(ball, f)
    if region is Region.Region1:
        return ClearOutDecision.ClearOut
    if region is Region.Region2:
        return ClearOutDecision.ClearOut if presence_line_clear(teammates, f) else ClearOutDecision.HoldLaterally
    return ClearOutDecision.PassiveGaze


def broadcast_clearout(announcing: bool, field_player_ids: Iterable[int]) -> Dict[int, Task]:
    """Directives implied by an active announcement."""
    if not announcing:
        return {}
    return {rid: Task.WaitClearOut for rid in field_player_ids}


def dive_signal(ball: Optional[Point], velocity: Optional[Point], goalie: Pose2D, f: FieldModel, cfg: TeamplayConfig = TeamplayConfig()) -> Optional[int]:
    """+1/-1 (left/right of the goalie) when a shot will pass out of its reach."""
    if ball is None or velocity is None:
        return None
    vx, vy = velocity
    if vx >= -1e-9 or math.hypot(vx, vy) < cfg.dive_speed:
        return None
    gx = -f.half_length
    t = (gx - ball[0]) / vx
    if t < 0 or t > cfg.dive_horizon:
        return None
    y_cross = ball[1] + vy * t
    if abs(y_cross) > f.goal_width / 2 + 0.2:
        return None
    # where the ball passes the goalie's line
    tg = (goalie.x - ball[0]) / vx
    if tg < 0:
        return None
    offset = ball[1] + vy * tg - goalie.y
    if abs(offset) < cfg.dive_min_offset:
        return None
    # facing +x, field +y is the goalie's left
    facing = 1.0 if math.cos(goalie.theta) >= 0 else -1.0
    return 1 if offset * facing > 0 else -1


# ---------------------------------------------------------------------------
# Negotiation


class NegotiationState(str, enum.Enum):
    Idle = "Idle"
    RequestSent = "RequestSent"
    RequestReceived = "RequestReceived"
    ResponseSent = "ResponseSent"
    AwaitConfirm = "AwaitConfirm"


@dataclass
class Negotiation:
    state: NegotiationState = NegotiationState.Idle
    peer: Optional[int] = None
    nonce: Optional[int] = None
    started: float = 0.0
    deadline: float = 0.0
    # requester's acceptance deadline, known to both parties
    request_deadline: float = 0.0

    def matches(self, sender: int, nonce: int) -> bool:
        return self.peer == sender and self.nonce == nonce


@dataclass(frozen=True)
class TaskChange:
    robot: int
    time: float
    prior: Task
    new: Task
    cause: str


@dataclass(frozen=True)
class Note:
    """Loggable protocol event that is not a task change."""

    robot: int
    time: float
    kind: str
    detail: Tuple[Tuple[str, object], ...] = ()

    def as_dict(self) -> dict:
        return dict(self.detail)


@dataclass
class TickResult:
    changes: List[TaskChange] = field(default_factory=list)
    outgoing: List[NegotiationPayload] = field(default_factory=list)
    notes: List[Note] = field(default_factory=list)

    def extend(self, other: "TickResult") -> None:
        self.changes.extend(other.changes)
        self.outgoing.extend(other.outgoing)
        self.notes.extend(other.notes)


class TaskManager:
    """Per-robot task state.

    Clear-out is an overlay: while a fresh goalkeeper announcement is
    visible the reported task is WaitClearOut, but the underlying striker or
    defender assignment (and any handshake already in flight) is kept so
    that no second striker can appear when the overlay lifts.
    """

    def __init__(
        self,
        robot_id: int,
        role: Role,
        field_model: FieldModel,
        config: TeamplayConfig = TeamplayConfig(),
        initial_task: Optional[Task] = None,
        teamplay: bool = True,
    ):
        self.id = robot_id
        self.role = role
        self.field = field_model
        self.config = config
        self.teamplay = teamplay
        if role is Role.Goalkeeper:
            self.base_task = Task.KeepGoal
        else:
            self.base_task = initial_task or (Task.Attack if not teamplay else Task.Defend)
            if self.base_task not in (Task.Attack, Task.Defend):
                raise ValueError(f"field player cannot start as {self.base_task}")
        self.overlay = False
        self.announcing = False
        self.neg = Negotiation()
        self.votes = VoteBuffer(config.confirm_cycles)
        self.clearout_votes = VoteBuffer(config.confirm_cycles)
        self._nonce = 0
        self._active = True
        self._listening_since: Optional[float] = None

    # -- reported state ---------------------------------------------------

    @property
    def task(self) -> Task:
        if self.overlay and self.role is Role.FieldPlayer:
            return Task.WaitClearOut
        return self.base_task

    def _set_base(self, new: Task, now: float, cause: str, res: TickResult) -> None:
        before = self.task
        self.base_task = new
        after = self.task
        if after != before:
            res.changes.append(TaskChange(self.id, now, before, after, cause))

    def _set_overlay(self, on: bool, now: float, cause: str, res: TickResult) -> None:
        before = self.task
        self.overlay = on
        after = self.task
        if after != before:
            res.changes.append(TaskChange(self.id, now, before, after, cause))

    def _note(self, res: TickResult, now: float, note: str, **detail) -> None:
        res.notes.append(Note(self.id, now, note, tuple(sorted(detail.items()))))

    def _send(self, res: TickResult, kind: NegotiationKind, to: int, nonce: int, request_time: float, now: float) -> None:
        res.outgoing.append(NegotiationPayload(kind, to, nonce, request_time))
        self._note(res, now, "NegotiationSend", kind=kind.value, to=to, nonce=nonce)

    def _next_nonce(self) -> int:
        self._nonce += 1
        return self.id * 1_000_000 + self._nonce

    # -- periodic decision cycle -------------------------------------------

    def tick(self, now: float, me: SelfView, inbox: Sequence[TeamMessage]) -> TickResult:
        res = TickResult()
        if self.role is Role.Goalkeeper:
            self._goalkeeper_tick(now, me, inbox, res)
            return res
        if not self.teamplay or not me.active:
            return res
        if self._listening_since is None:
            self._listening_since = now
        others = field_players(inbox, self.id)
        self._check_timeouts(now, others, res)

        announced = any(m.role is Role.Goalkeeper and m.active and m.clearout for m in inbox if m.sender_id != self.id)
        if announced != self.overlay:
            self.votes.clear()
            self._set_overlay(announced, now, "ClearOutAnnounced" if announced else "ClearOutEnded", res)
        if self.overlay:
            return res
        if self.neg.state is not NegotiationState.Idle:
            self.votes.clear()
            return res

        if self.base_task is Task.Defend:
            holders = [m for m in others if m.task in (Task.Attack, Task.ChangeTask, Task.WaitClearOut)]
            # Silence only means vacancy after listening for a full horizon;
            # an egress announcement is immediate evidence.
            egress = any(not m.active and m.role is Role.FieldPlayer for m in inbox if m.sender_id != self.id)
            heard_long_enough = now - self._listening_since >= self.config.staleness_horizon - 1e-9
            if not holders and (egress or heard_long_enough) and self.id == min([self.id] + [m.sender_id for m in others]):
                self.votes.clear()
                self._set_base(Task.Attack, now, "Vacancy", res)
                return res
            wish = desired_task(me, inbox, self.field, self.config)
            confirmed = self.votes.push(wish)
            if confirmed is Task.Attack:
                strikers = sorted(m.sender_id for m in others if m.task is Task.Attack)
                self.votes.clear()
                self._note(res, now, "VoteConfirmed", decision=Task.Attack.value)
                if strikers:
                    self._request(now, strikers[0], res)
        elif self.base_task is Task.Attack:
            self.votes.clear()
            # Two strikers can only coexist after a partition longer than the
            # staleness horizon; the higher id yields.
            rivals = [m.sender_id for m in others if m.task is Task.Attack and m.sender_id < self.id]
            if rivals:
                self._set_base(Task.Defend, now, "StrikerConflict", res)
        return res

    def _request(self, now: float, striker: int, res: TickResult) -> None:
        nonce = self._next_nonce()
        timeout = self.config.negotiation_timeout
        self.neg = Negotiation(NegotiationState.RequestSent, striker, nonce, now, now + timeout, now + timeout)
        self._send(res, NegotiationKind.Request, striker, nonce, now, now)

    def _check_timeouts(self, now: float, others: Sequence[TeamMessage], res: TickResult) -> None:
        neg = self.neg
        if neg.state is NegotiationState.RequestSent and now > neg.deadline + 1e-9:
            self._note(res, now, "NegotiationTimeout", state=neg.state.value, peer=neg.peer, nonce=neg.nonce)
            self.neg = Negotiation()
            self.votes.clear()
        elif neg.state is NegotiationState.AwaitConfirm and now > neg.deadline + 1e-9:
            peer = next((m for m in others if m.sender_id == neg.peer), None)
            if peer is None:
                # No fresh word from the requester: it is gone or silent.
                self._resolve_await(now, Task.Attack, "NegotiationTimeout", res)
            elif peer.send_time > neg.request_deadline + 1e-9:
                if peer.task in (Task.Attack, Task.ChangeTask):
                    self._resolve_await(now, Task.Defend, "ConfirmInferred", res)
                elif peer.task is Task.Defend:
                    self._resolve_await(now, Task.Attack, "NegotiationTimeout", res)
            # else: wait for a status that settles the requester's decision

    def _resolve_await(self, now: float, task: Task, cause: str, res: TickResult) -> None:
        self._note(res, now, cause, peer=self.neg.peer, nonce=self.neg.nonce)
        self.neg = Negotiation()
        self._set_base(task, now, cause, res)

    # -- event-driven negotiation ------------------------------------------

    def handle_negotiation(self, now: float, msg: TeamMessage, me: SelfView) -> TickResult:
        res = TickResult()
        p = msg.negotiation
        if p is None or p.to != self.id:
            return res
        self._note(res, now, "NegotiationReceive", kind=p.kind.value, sender=msg.sender_id, nonce=p.nonce)
        if p.kind is NegotiationKind.Request:
            self._on_request(now, msg, me, res)
        elif p.kind is NegotiationKind.Accept:
            ok = self.neg.state is NegotiationState.RequestSent and self.neg.matches(msg.sender_id, p.nonce) and now <= self.neg.deadline + 1e-9
            if ok and me.active:
                self.neg = Negotiation()
                self.votes.clear()
                self._set_base(Task.Attack, now, "NegotiationAccepted", res)
                self._send(res, NegotiationKind.Confirm, msg.sender_id, p.nonce, p.request_time, now)
            else:
                self._note(res, now, "Ignored", kind=p.kind.value, sender=msg.sender_id)
        elif p.kind is NegotiationKind.Reject:
            if self.neg.state is NegotiationState.RequestSent and self.neg.matches(msg.sender_id, p.nonce):
                self.neg = Negotiation()
                self.votes.clear()
                self._note(res, now, "NegotiationRejected", peer=msg.sender_id, nonce=p.nonce)
        elif p.kind is NegotiationKind.Confirm:
            if self.neg.state is NegotiationState.AwaitConfirm and self.neg.matches(msg.sender_id, p.nonce):
                self.neg = Negotiation()
                self._set_base(Task.Defend, now, "NegotiationConfirmed", res)
            else:
                self._note(res, now, "Ignored", kind=p.kind.value, sender=msg.sender_id)
        return res

    def _on_request(self, now: float, msg: TeamMessage, me: SelfView, res: TickResult) -> None:
        p = msg.negotiation
        timeout = self.config.negotiation_timeout
        expired = now > p.request_time + timeout + 1e-9
        busy = self.neg.state is not NegotiationState.Idle
        eligible = (
            self.teamplay
            and self.role is Role.FieldPlayer
            and self.base_task is Task.Attack
            and not busy
            and not self.overlay
            and me.active
            and not expired
        )
        if eligible:
            w = self.config.alignment_weight
            if better_than(message_cost(msg, self.field, w), msg.sender_id, me.cost(self.field, w), self.id):
                self.neg = Negotiation(
                    NegotiationState.AwaitConfirm, msg.sender_id, p.nonce, now, now + timeout, p.request_time + timeout
                )
                self._set_base(Task.ChangeTask, now, "NegotiationRequested", res)
                self._send(res, NegotiationKind.Accept, msg.sender_id, p.nonce, p.request_time, now)
                return
        self._send(res, NegotiationKind.Reject, msg.sender_id, p.nonce, p.request_time, now)

    # -- egress -------------------------------------------------------------

    def on_egress(self, now: float, reason: str) -> TickResult:
        """Leaving play: drop any striker claim and abandon negotiations."""
        res = TickResult()
        self._active = False
        if self.role is Role.Goalkeeper:
            self.announcing = False
            return res
        if self.neg.state is not NegotiationState.Idle:
            self._note(res, now, "NegotiationAbandoned", peer=self.neg.peer, nonce=self.neg.nonce)
            self.neg = Negotiation()
        self.votes.clear()
        self._set_overlay(False, now, "Egress", res)
        if self.teamplay and self.base_task in (Task.Attack, Task.ChangeTask):
            self._set_base(Task.Defend, now, f"Egress:{reason}", res)
        return res

    def on_return(self, now: float) -> TickResult:
        self._active = True
        self.votes.clear()
        return TickResult()

    # -- goalkeeper -----------------------------------------------------------

    def _goalkeeper_tick(self, now: float, me: SelfView, inbox: Sequence[TeamMessage], res: TickResult) -> None:
        if not self.teamplay or not me.active:
            self.announcing = False
            return
        ball = fused_ball(me.ball, inbox)
        # Robots already waiting for this clear-out do not count as presence.
        present = [m.robot_pose.position for m in field_players(inbox, self.id) if m.task is not Task.WaitClearOut]
        decision = clearout_decision(ball, present, self.field)
        confirmed = self.clearout_votes.push(decision is ClearOutDecision.ClearOut)
        was = self.announcing
        if decision is not ClearOutDecision.ClearOut:
            self.announcing = False
        elif confirmed:
            self.announcing = True
        if was != self.announcing:
            self._note(res, now, "ClearOut", active=self.announcing, decision=decision.value)

    def goalkeeper_decision(self, me: SelfView, inbox: Sequence[TeamMessage]) -> ClearOutDecision:
        ball = fused_ball(me.ball, inbox)
        present = [m.robot_pose.position for m in field_players(inbox, self.id) if m.task is not Task.WaitClearOut]
        return clearout_decision(ball, present, self.field)


def initial_tasks(roster: Sequence[Tuple[int, Role]], teamplay: bool = True) -> Dict[int, Task]:
    """Lowest-id field player starts as striker; without team play all attack."""
    out: Dict[int, Task] = {}
    fps = sorted(rid for rid, role in roster if role is Role.FieldPlayer)
    for rid, role in roster:
        if role is Role.Goalkeeper:
            out[rid] = Task.KeepGoal
        elif not teamplay or rid == fps[0]:
            out[rid] = Task.Attack
        else:
            out[rid] = Task.Defend
    return out


def compose_status(tm: TaskManager, me: SelfView, now: float, negotiation: Optional[NegotiationPayload] = None, possession_radius: float = 0.5) -> TeamMessage:
    """The status record a robot puts on the bus."""
    visible = me.ball is not None and me.active
    d = dist(me.pose.position, me.ball) if visible else None
    return TeamMessage(
        sender_id=tm.id,
        send_time=now,
        task=tm.task,
        robot_pose=me.pose,
        ball_visible=visible,
        ball_distance=d,
        ball_possession=bool(visible and d <= possession_radius),
        ball_location=me.ball if visible else None,
        active=me.active,
        fallen=me.fallen,
        negotiation=negotiation,
        role=tm.role,
        clearout=tm.announcing,
    )
