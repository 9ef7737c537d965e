"""Protocol verification harnesses.

``model_check`` drives two real task managers through one reassignment
exchange for every subset of dropped handshake messages, every choice of
per-message delivery delay and optional status blackouts, and records each
reachable task/negotiation state. ``stress_run`` plays long randomized
games at protocol level: real task managers on a real lossy bus, with
abstract kinematics so that many ten-minute games fit in a short budget.
"""
from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from .geometry import DefenderParams, FieldModel, Pose2D, defender_target_pose, dist
from .netcomms import Bus, BusConfig, TeamMessage
from .tasks import NegotiationKind, Role, Task
from .teamplay import SelfView, TaskManager, TeamplayConfig, compose_status

HANDSHAKE = ("Request", "Response", "Confirm")


def _stage(kind: NegotiationKind) -> str:
    if kind is NegotiationKind.Request:
        return "Request"
    if kind is NegotiationKind.Confirm:
        return "Confirm"
    return "Response"


@dataclass(frozen=True)
class ExchangeCase:
    shape: str  # "accept" or "reject"
    dropped: FrozenSet[str] = frozenset()
    delays: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    status_blackout: float = 0.0


@dataclass
class CaseResult:
    case: ExchangeCase
    violations: List[str]
    states: Set[Tuple[str, str, str, str]]
    final_tasks: Tuple[Task, Task]
    exchange_started: bool


@dataclass
class ModelCheckReport:
    results: List[CaseResult]

    @property
    def violations(self) -> List[Tuple[ExchangeCase, str]]:
        return [(r.case, v) for r in self.results for v in r.violations]

    @property
    def reachable(self) -> Set[Tuple[str, str, str, str]]:
        out: Set[Tuple[str, str, str, str]] = set()
        for r in self.results:
            out |= r.states
        return out


def run_exchange(
    case: ExchangeCase,
    horizon: float = 8.0,
    f: FieldModel = FieldModel(),
    cfg: TeamplayConfig = TeamplayConfig(),
    manager_factory=TaskManager,
) -> CaseResult:
    """Striker 2 and defender 3; the defender's votes start the exchange.

    In the reject shape the striker's status reports no ball (so the
    defender believes it is better placed) while the striker itself sees the
    ball at its feet when it evaluates the request.
    """
    dt, control_every, period = 0.02, 6, 0.125
    ball = (1.0, 0.0)
    striker_pose = Pose2D(-2.0, 0.0, 0.0)
    defender_pose = Pose2D(0.5, 0.0, 0.0)
    a = manager_factory(2, Role.FieldPlayer, f, cfg, Task.Attack)
    b = manager_factory(3, Role.FieldPlayer, f, cfg, Task.Defend)
    managers = {2: a, 3: b}
    if case.shape == "accept":
        decide = {2: SelfView(2, Role.FieldPlayer, striker_pose, ball), 3: SelfView(3, Role.FieldPlayer, defender_pose, ball)}
        status = dict(decide)
    else:
        near = (striker_pose.x + 0.1, 0.0)
        decide = {2: SelfView(2, Role.FieldPlayer, striker_pose, near), 3: SelfView(3, Role.FieldPlayer, defender_pose, ball)}
        status = {2: SelfView(2, Role.FieldPlayer, striker_pose, None), 3: decide[3]}

    latest: Dict[int, Dict[int, TeamMessage]] = {2: {}, 3: {}}
    queue: List[Tuple[float, int, int, TeamMessage]] = []
    seq = itertools.count()
    first: Dict[str, Optional[int]] = {s: None for s in HANDSHAKE}
    blackout_until = -1.0
    violations: List[str] = []
    states: Set[Tuple[str, str, str, str]] = set()
    started = False

    def snapshot(now: float) -> None:
        tasks = (a.task, b.task)
        states.add((a.task.value, a.neg.state.value, b.task.value, b.neg.state.value))
        if tasks.count(Task.Attack) > 1:
            violations.append(f"t={now:.2f} two strikers {tasks}")

    def emit(sender: int, now: float, payload=None) -> None:
        nonlocal blackout_until, started
        tm = managers[sender]
        msg = compose_status(tm, status[sender], now, payload)
        delay = 0.0
        if payload is not None:
            stage = _stage(payload.kind)
            if stage == "Request" and tm.task is not Task.Defend:
                violations.append(f"t={now:.2f} request from {tm.task.value}")
            if first[stage] is None:
                first[stage] = payload.nonce
                if stage == "Request":
                    started = True
                    blackout_until = now + case.status_blackout
                if stage in case.dropped:
                    return
                delay = case.delays[HANDSHAKE.index(stage)]
        elif now < blackout_until:
            return
        receiver = 3 if sender == 2 else 2
        heapq.heappush(queue, (now + delay, next(seq), receiver, msg))

    steps = int(round(horizon / dt))
    last_slot = {2: -1, 3: -1}
    for k in range(steps + 1):
        now = k * dt
        while queue and queue[0][0] <= now + 1e-9:
            _, _, receiver, msg = heapq.heappop(queue)
            box = latest[receiver]
            if msg.sender_id not in box or box[msg.sender_id].send_time <= msg.send_time:
                box[msg.sender_id] = msg
            if msg.negotiation is not None and msg.negotiation.to == receiver:
                res = managers[receiver].handle_negotiation(now, msg, decide[receiver])
                for p in res.outgoing:
                    emit(receiver, now, p)
                snapshot(now)
        if k % control_every == 0:
            for rid in (2, 3):
                inbox = [m for m in latest[rid].values() if now - m.send_time <= 5.0 + 1e-9]
                res = managers[rid].tick(now, decide[rid], inbox)
                for p in res.outgoing:
                    emit(rid, now, p)
                snapshot(now)
        for rid in (2, 3):
            slot = int(math.floor(now / period + 1e-9))
            if slot != last_slot[rid]:
                last_slot[rid] = slot
                emit(rid, now)
    return CaseResult(case, violations, states, (a.task, b.task), started)


def all_cases(delays: Sequence[float] = (0.0, 0.6, 1.5), blackouts: Sequence[float] = (0.0, 2.0), shapes: Sequence[str] = ("accept", "reject")) -> List[ExchangeCase]:
    out = []
    for shape in shapes:
        for r in range(len(HANDSHAKE) + 1):
            for dropped in itertools.combinations(HANDSHAKE, r):
                for d in itertools.product(delays, repeat=3):
                    for bo in blackouts:
                        out.append(ExchangeCase(shape, frozenset(dropped), tuple(d), bo))
    return out


def model_check(cases: Optional[Sequence[ExchangeCase]] = None, horizon: float = 8.0, manager_factory=TaskManager) -> ModelCheckReport:
    chosen = cases if cases is not None else all_cases()
    return ModelCheckReport([run_exchange(c, horizon, manager_factory=manager_factory) for c in chosen])


# ---------------------------------------------------------------------------
# Randomized long runs


@dataclass(frozen=True)
class StressConfig:
    loss: float
    seed: int
    duration: float = 600.0
    tick: float = 0.12
    latency: float = 0.05
    jitter: float = 0.04
    fall_rate: float = 1 / 90.0
    fall_duration: float = 4.0
    penalty_rate: float = 1 / 240.0
    penalty_duration: float = 30.0
    ball_event_rate: float = 1 / 6.0
    own_area_fraction: float = 0.15
    see_probability: float = 0.85
    ball_noise: float = 0.05


@dataclass
class StressResult:
    config: StressConfig
    violations: List[str] = field(default_factory=list)
    task_changes: int = 0
    requests: int = 0
    accepts: int = 0
    confirms: int = 0
    clearouts: int = 0
    max_vacancy: float = 0.0


def stress_run(sc: StressConfig, f: FieldModel = FieldModel(), cfg: TeamplayConfig = TeamplayConfig()) -> StressResult:
    rng = random.Random(sc.seed)
    result = StressResult(sc)
    roster = {1: Role.Goalkeeper, 2: Role.FieldPlayer, 3: Role.FieldPlayer}
    bus = Bus(BusConfig(loss_probability=sc.loss, latency=sc.latency, jitter=sc.jitter), roster, seed=rng.randrange(1 << 30))
    tms = {
        1: TaskManager(1, Role.Goalkeeper, f, cfg),
        2: TaskManager(2, Role.FieldPlayer, f, cfg, Task.Attack),
        3: TaskManager(3, Role.FieldPlayer, f, cfg, Task.Defend),
    }
    poses = {1: Pose2D(-4.25, 0.0, 0.0), 2: Pose2D(-0.75, 0.0, 0.0), 3: Pose2D(-2.5, -1.0, 0.0)}
    fallen_until = {r: -1.0 for r in roster}
    penalized_until = {r: -1.0 for r in roster}
    ball = (0.0, 0.0)
    step_len = 0.25 * sc.tick
    vacancy_since: Optional[float] = None

    def view(rid: int, now: float) -> SelfView:
        active = now >= penalized_until[rid]
        seen = None
        if active and rng.random() < sc.see_probability:
            seen = (ball[0] + rng.gauss(0, sc.ball_noise), ball[1] + rng.gauss(0, sc.ball_noise))
        return SelfView(rid, roster[rid], poses[rid], seen, None, now < fallen_until[rid], active)

    def apply(rid: int, res, now: float, me: SelfView) -> None:
        result.task_changes += len(res.changes)
        for note in res.notes:
            if note.kind == "ClearOut" and note.as_dict().get("active"):
                result.clearouts += 1
        for p in res.outgoing:
            if p.kind is NegotiationKind.Request:
                result.requests += 1
                if tms[rid].task is not Task.Defend:
                    result.violations.append(f"t={now:.2f} r{rid} requested while {tms[rid].task.value}")
            elif p.kind is NegotiationKind.Accept:
                result.accepts += 1
            elif p.kind is NegotiationKind.Confirm:
                result.confirms += 1
            bus.send(compose_status(tms[rid], me, now, p), now, "negotiation")

    def check(now: float) -> None:
        nonlocal vacancy_since
        attack = [r for r, tm in tms.items() if tm.task is Task.Attack]
        if len(attack) > 1:
            result.violations.append(f"t={now:.2f} strikers {attack}")
        if tms[1].task is not Task.KeepGoal:
            result.violations.append(f"t={now:.2f} goalkeeper task {tms[1].task.value}")
        active_fp = [r for r in (2, 3) if now >= penalized_until[r]]
        holder = any(tms[r].base_task in (Task.Attack, Task.ChangeTask) for r in active_fp)
        if active_fp and not holder:
            if vacancy_since is None:
                vacancy_since = now
            result.max_vacancy = max(result.max_vacancy, now - vacancy_since)
        else:
            vacancy_since = None

    n_ticks = int(round(sc.duration / sc.tick))
    for k in range(n_ticks):
        now = k * sc.tick
        # world events
        if rng.random() < sc.ball_event_rate * sc.tick:
            if rng.random() < sc.own_area_fraction:
                ball = (rng.uniform(-4.4, -3.6), rng.uniform(-1.3, 1.3))
            else:
                ball = (rng.uniform(-4.4, 4.4), rng.uniform(-2.9, 2.9))
        for rid in (2, 3):
            if now >= penalized_until[rid] and now >= fallen_until[rid] and rng.random() < sc.fall_rate * sc.tick:
                fallen_until[rid] = now + sc.fall_duration
            if now >= penalized_until[rid] and rng.random() < sc.penalty_rate * sc.tick:
                penalized_until[rid] = now + sc.penalty_duration
                me = view(rid, now)
                apply(rid, tms[rid].on_egress(now, "Penalized"), now, me)
                bus.send(compose_status(tms[rid], me, now), now, "egress")
            elif penalized_until[rid] > 0 and abs(now - penalized_until[rid]) < sc.tick / 2:
                apply(rid, tms[rid].on_return(now), now, view(rid, now))
        views = {rid: view(rid, now) for rid in roster}
        # negotiation traffic that has arrived
        for _ in range(8):
            moved = False
            for rid in sorted(roster):
                for msg in bus.take_negotiation(rid, now):
                    moved = True
                    apply(rid, tms[rid].handle_negotiation(now, msg, views[rid]), now, views[rid])
                    check(now)
            if not moved:
                break
        for rid in sorted(roster):
            apply(rid, tms[rid].tick(now, views[rid], bus.inbox(rid, now)), now, views[rid])
        check(now)
        for rid in sorted(roster):
            if bus.due(rid, now):
                bus.broadcast(compose_status(tms[rid], views[rid], now), now)
        # abstract kinematics
        for rid in (2, 3):
            if now < penalized_until[rid] or now < fallen_until[rid]:
                continue
            task = tms[rid].task
            if task is Task.Attack:
                target = ball
            elif task is Task.WaitClearOut:
                target = (-2.9, 1.8 if rid == 2 else -1.8)
            else:
                target = defender_target_pose(ball, None, f, DefenderParams()).position
            d = dist(poses[rid].position, target)
            s = min(step_len, d)
            if d > 1e-9:
                u = ((target[0] - poses[rid].x) / d, (target[1] - poses[rid].y) / d)
                poses[rid] = Pose2D(poses[rid].x + s * u[0], poses[rid].y + s * u[1], math.atan2(u[1], u[0]))
            if task is Task.Attack and dist(poses[rid].position, ball) < 0.3:
                ang = rng.uniform(-0.6, 0.6)
                ball = f.clamp_to_field((ball[0] + 1.5 * math.cos(ang), ball[1] + 1.5 * math.sin(ang)))
        if tms[1].announcing and rng.random() < 0.3:
            ball = (rng.uniform(-1.0, 2.0), rng.uniform(-2.5, 2.5))
    return result
