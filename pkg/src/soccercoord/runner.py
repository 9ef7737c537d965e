"""Scenario runner: kernel, perception, team bus, task managers and controllers.

One kernel step per loop iteration. Negotiation messages are handled on
every step; perception, task ticks and controllers run on the control
period; status broadcasts go out as soon as a robot's bus slot opens.
"""
from __future__ import annotations

import math
import random
import statistics
from dataclasses import dataclass, field
from typing import IO, Dict, List, Optional, Tuple

from .behavior import BeliefSnapshot, BehaviorController, StepOutput
from .checker import SAFETY_RULES, Checker, Finding
from .geometry import Point, Pose2D, classify_ball_region, dist, normalize_angle
from .localization import (
    Hypothesis,
    HypothesisBank,
    LandmarkMap,
    Localizer,
    OdometryDelta,
    SensorModel,
    simulate_observations,
)
from .netcomms import Bus, BusConfig, TeamMessage
from .scenario import Fault, RobotSpec, Scenario
from .simkernel import (
    TEAMS,
    Event,
    GCPhase,
    InvalidRobot,
    KernelConfig,
    KickCommand,
    RobotBody,
    RobotCommand,
    BallState,
    auto_position_targets,
    inject_fall,
    new_world,
    penalize,
    pose_from_team_frame,
    pose_to_team_frame,
    step,
    to_team_frame,
)
from .tasks import NegotiationKind, Role, Task
from .teamplay import (
    SelfView,
    TaskManager,
    TickResult,
    compose_status,
    dive_signal,
    field_players,
    fused_ball,
    initial_tasks,
)
from .trace import SCHEMA_VERSION, TraceWriter

FOV = math.radians(75.0)


@dataclass
class Agent:
    spec: RobotSpec
    tm: TaskManager
    ctrl: BehaviorController
    localizer: Optional[Localizer]
    rng: random.Random
    last_true: Pose2D
    belief: Pose2D
    view: SelfView
    ball_prev: Optional[Point] = None
    ball_last_seen: Optional[Tuple[Point, float]] = None
    command: Optional[RobotCommand] = None
    output: Optional[StepOutput] = None


@dataclass
class RunResult:
    summary: dict
    findings: List[Finding]
    records: List[dict] = field(default_factory=list)

    @property
    def safety_violations(self) -> List[Finding]:
        return [f for f in self.findings if f.rule in SAFETY_RULES]

    @property
    def exit_code(self) -> int:
        return 1 if self.safety_violations else 0


def _known_bank(pose: Pose2D) -> HypothesisBank:
    return HypothesisBank((Hypothesis(pose, 1.0),))


class Runner:
    def __init__(self, scenario: Scenario, out: Optional[IO[str]] = None, keep_records: bool = False,
                 kernel: KernelConfig = KernelConfig()):
        self.sc = scenario
        self.f = scenario.field
        self.kcfg = kernel
        self.keep = keep_records
        self.records: List[dict] = []
        self.findings: List[Finding] = []
        self.writer = TraceWriter(out)
        self.checker: Optional[Checker] = None
        master = random.Random(scenario.seed)
        world_seed = master.randrange(1 << 32)
        bus_seeds = {t: master.randrange(1 << 32) for t in TEAMS}
        robot_seeds = {r.id: master.randrange(1 << 32) for r in sorted(scenario.robots, key=lambda r: r.id)}

        self.teams = [t for t in TEAMS if scenario.team(t)]
        bodies = []
        starts: Dict[int, Pose2D] = {}
        for team in self.teams:
            roster = scenario.team(team)
            slots = auto_position_targets([(r.id, r.role) for r in roster], self.f, scenario.kickoff == team)
            for r in roster:
                local = r.pose if r.pose is not None else slots[r.id]
                starts[r.id] = local
                bodies.append(RobotBody(r.id, team, r.role, pose_from_team_frame(team, local)))
        self.world = new_world(self.f, bodies, scenario.ball, world_seed, kernel, scenario.phase)
        self.world.kickoff_team = scenario.kickoff

        bc = BusConfig(period=scenario.bus.period, loss_probability=scenario.bus.loss, latency=scenario.bus.latency,
                       jitter=scenario.bus.jitter, staleness_horizon=scenario.bus.staleness)
        self._pending_msg: List[Tuple[str, int, Optional[int], TeamMessage, str, float]] = []
        self.buses = {
            t: Bus(bc, [r.id for r in scenario.team(t)], bus_seeds[t], listener=self._listen) for t in self.teams
        }
        self.sensor = SensorModel(
            range_sigma=scenario.noise.range_sigma, bearing_sigma=scenario.noise.bearing_sigma,
            detection_probability=scenario.noise.detection_probability,
        )
        self.lmap = LandmarkMap.from_field(self.f)
        self.agents: Dict[int, Agent] = {}
        for team in self.teams:
            roster = scenario.team(team)
            tasks = initial_tasks([(r.id, r.role) for r in roster], scenario.teamplay)
            for r in roster:
                tm = TaskManager(r.id, r.role, self.f, initial_task=tasks[r.id] if r.role is Role.FieldPlayer else None,
                                 teamplay=scenario.teamplay)
                loc = None
                if scenario.localization == "known":
                    loc = Localizer(self.f, lmap=self.lmap, bank=_known_bank(starts[r.id]))
                elif scenario.localization == "hypotheses":
                    loc = Localizer(self.f, lmap=self.lmap)
                belief = loc.estimate if loc is not None else starts[r.id]
                view = SelfView(r.id, r.role, belief, None, None, False, True)
                self.agents[r.id] = Agent(r, tm, BehaviorController(r.id, r.role, self.f), loc,
                                          random.Random(robot_seeds[r.id]), starts[r.id], belief, view)
        self.faults: List[Fault] = list(scenario.faults)
        self.timed: List[Tuple[float, int, str, tuple]] = []  # (time, order, action, args)
        self._order = 0
        self.loc_errors: List[float] = []
        self.counts: Dict[str, int] = {}
        self.task_changes = 0
        self.broadcast_times: Dict[int, List[float]] = {rid: [] for rid in self.agents}

    # -- trace plumbing ---------------------------------------------------------

    def _emit(self, kind: str, time: float, **payload) -> dict:
        rec = self.writer.write(kind, time, **payload)
        if self.keep:
            self.records.append(rec)
        if self.checker is not None:
            for finding in self.checker.feed(rec):
                self._violation(finding)
        return rec

    def _violation(self, finding: Finding) -> None:
        self.findings.append(finding)
        rec = self.writer.write("Violation", finding.time, **finding.as_record())
        if self.keep:
            self.records.append(rec)

    def _count(self, key: str, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + n

    def _listen(self, op, sender, receiver, msg, cause, time) -> None:
        if op in ("send", "drop"):
            self._pending_msg.append((op, sender, receiver, msg, cause, time))

    def _flush_messages(self, team: str) -> None:
        if not self._pending_msg:
            return
        op, sender, _, msg, cause, time = self._pending_msg[0]
        to = [r for o, _, r, _, _, _ in self._pending_msg if o == "send"]
        dropped = [r for o, _, r, _, _, _ in self._pending_msg if o == "drop"]
        self._pending_msg = []
        neg = msg.negotiation
        self._emit(
            "Message", time, team=team, sender=sender, cause=cause, task=msg.task, send_time=msg.send_time,
            to=to, dropped=dropped, active=msg.active, fallen=msg.fallen, clearout=msg.clearout,
            negotiation=None if neg is None else {"kind": neg.kind, "to": neg.to, "nonce": neg.nonce},
        )
        self._count("messages_sent", len(to) + len(dropped))
        self._count("messages_dropped", len(dropped))

    def _send(self, agent: Agent, msg: TeamMessage, now: float, cause: str) -> None:
        team = agent.spec.team
        bus = self.buses[team]
        if cause == "status":
            bus.broadcast(msg, now)
            self.broadcast_times[agent.spec.id].append(now)
        else:
            bus.send(msg, now, cause)
        self._flush_messages(team)

    def _apply(self, agent: Agent, res: TickResult, now: float) -> None:
        team = agent.spec.team
        for ch in res.changes:
            self.task_changes += 1
            self._emit("TaskChange", now, robot=ch.robot, team=team, prior=ch.prior, new=ch.new, cause=ch.cause)
        for note in res.notes:
            if note.kind in ("NegotiationSend", "NegotiationReceive", "Ignored"):
                if note.kind == "NegotiationSend":
                    self._count(f"sent_{note.as_dict()['kind']}")
                continue
            self._count(f"note_{note.kind}" if note.kind != "ClearOut" or note.as_dict().get("active") else "note_ClearOutEnd")
            self._emit("Event", now, event=note.kind, source="teamplay", robot=note.robot, team=team, detail=note.as_dict())
        for payload in res.outgoing:
            self._send(agent, compose_status(agent.tm, agent.view, now, payload), now, "negotiation")

    # -- perception ---------------------------------------------------------------

    def _perceive(self, agent: Agent, now: float) -> None:
        body = self.world.robots[agent.spec.id]
        team = agent.spec.team
        true = pose_to_team_frame(team, body.true_pose)
        noise = self.sc.noise
        if body.penalized:
            agent.last_true = true
            agent.ball_prev = None
            agent.view = SelfView(agent.spec.id, agent.spec.role, agent.belief, None, None, False, False)
            return
        prev = agent.last_true
        rel = prev.to_local(true.position)
        dth = normalize_angle(true.theta - prev.theta)
        if noise.odometry_sigma > 0:
            scale = math.hypot(*rel) + abs(dth)
            rel = (rel[0] + agent.rng.gauss(0, noise.odometry_sigma * scale), rel[1] + agent.rng.gauss(0, noise.odometry_sigma * scale))
        agent.last_true = true
        if agent.localizer is not None:
            obs = simulate_observations(true, self.lmap, self.sensor, agent.rng)
            agent.belief = agent.localizer.step(OdometryDelta(rel[0], rel[1], dth), obs)
        else:
            agent.belief = true
        self.loc_errors.append(dist(agent.belief.position, true.position))

        ball_team = to_team_frame(team, self.world.ball.position)
        local = true.to_local(ball_team)
        r = math.hypot(*local)
        seen = None
        if not body.fallen and r <= noise.ball_range and abs(math.atan2(local[1], local[0])) <= FOV:
            if noise.detection_probability >= 1.0 or agent.rng.random() < noise.detection_probability:
                if noise.ball_sigma > 0:
                    local = (local[0] + agent.rng.gauss(0, noise.ball_sigma), local[1] + agent.rng.gauss(0, noise.ball_sigma))
                seen = agent.belief.to_field(local)
        velocity = None
        period = self.kcfg.dt * self.kcfg.control_every
        if seen is not None and agent.ball_prev is not None:
            velocity = ((seen[0] - agent.ball_prev[0]) / period, (seen[1] - agent.ball_prev[1]) / period)
        agent.ball_prev = seen
        if seen is not None:
            agent.ball_last_seen = (seen, now)
        agent.view = SelfView(agent.spec.id, agent.spec.role, agent.belief, seen, velocity, body.fallen, True)

    def _obstacles(self, agent: Agent) -> Tuple[Point, ...]:
        team = agent.spec.team
        true = agent.last_true
        out = []
        for rid in sorted(self.world.robots):
            other = self.world.robots[rid]
            if rid == agent.spec.id or other.penalized:
                continue
            local = true.to_local(to_team_frame(team, other.true_pose.position))
            if math.hypot(*local) <= self.sc.noise.ball_range and abs(math.atan2(local[1], local[0])) <= FOV:
                out.append(agent.belief.to_field(local))
        return tuple(out)

    # -- control tick -------------------------------------------------------------

    def _control(self, team: str, now: float) -> Tuple[List[dict], List[dict]]:
        bus = self.buses[team]
        world = self.world
        roster = self.sc.team(team)
        slots = auto_position_targets([(r.id, r.role) for r in roster], self.f, world.kickoff_team == team)
        rows, goalies = [], []
        for r in roster:
            self._perceive(self.agents[r.id], now)
        for r in roster:
            agent = self.agents[r.id]
            body = world.robots[r.id]
            inbox = bus.inbox(r.id, now)
            self._apply(agent, agent.tm.tick(now, agent.view, inbox), now)
            view = agent.view
            ball = fused_ball(view.ball, inbox)
            if r.role is Role.Goalkeeper:
                presence = [m.robot_pose.position for m in field_players(inbox, r.id) if m.task is not Task.WaitClearOut]
                goalies.append({
                    "id": r.id, "team": team, "ball": ball, "presence": presence,
                    "region": classify_ball_region(ball, self.f).name if ball is not None else None,
                    "decision": agent.tm.goalkeeper_decision(view, inbox).value,
                    "announcing": agent.tm.announcing,
                })
            agent.command = None
            if body.can_move:
                belief = BeliefSnapshot(
                    view.pose, view.ball is not None, ball, agent.ball_last_seen, self._obstacles(agent), tuple(inbox),
                    agent.tm.task, world.gc_phase, now, r.id, r.role, slots.get(r.id),
                )
                dive = None
                if r.role is Role.Goalkeeper and world.gc_phase is GCPhase.Playing:
                    dive = dive_signal(view.ball, view.ball_velocity, view.pose, self.f)
                out = agent.ctrl.step(belief, agent.tm.announcing, dive)
                if out.transition:
                    self._emit("Event", now, event="BehaviorTransition", source="behavior", robot=r.id, team=team,
                               state=out.state, game_state=out.game_state, reason=out.reason)
                agent.output = out
                agent.command = self._to_kernel(team, out)
            rows.append({
                "id": r.id, "team": team, "role": r.role, "pose": list(body.true_pose.as_list()),
                "belief": list(view.pose.as_list()), "task": agent.tm.task,
                "state": agent.output.state if agent.output else None,
                "game": agent.output.game_state if agent.output else None,
                "active": body.active, "fallen": body.fallen,
                "ball": view.ball, "inbox": [[m.sender_id, m.send_time] for m in inbox],
            })
        return rows, goalies

    @staticmethod
    def _to_kernel(team: str, out: StepOutput) -> RobotCommand:
        cmd = out.command
        kick = None
        if cmd.kick_direction is not None and cmd.kick_strength is not None:
            world_dir = pose_from_team_frame(team, Pose2D(0.0, 0.0, cmd.kick_direction)).theta
            kick = KickCommand(world_dir, cmd.kick_strength)
        return RobotCommand(cmd.vx, cmd.vy, cmd.omega, kick, cmd.dive)

    # -- faults -----------------------------------------------------------------

    def _apply_faults(self, now: float) -> None:
        eps = 1e-9
        while self.timed and self.timed[0][0] <= now + eps:
            _, _, action, args = self.timed.pop(0)
            if action == "unpin":
                self.world.pinned_ball = None
                self._emit("Event", now, event="BallReleased", source="fault")
            elif action == "link_restore":
                team, sender, receiver = args
                self.buses[team].link_loss.pop((sender, receiver), None)
                self._emit("Event", now, event="LinkRestored", source="fault", team=team, sender=sender, receiver=receiver)
        while self.faults and self.faults[0].at <= now + eps:
            fault = self.faults.pop(0)
            self._fault(fault, now)

    def _schedule(self, at: float, action: str, args: tuple = ()) -> None:
        self._order += 1
        self.timed.append((at, self._order, action, args))
        self.timed.sort()

    def _fault(self, fault: Fault, now: float) -> None:
        w = self.world
        if fault.kind in ("fall", "penalize"):
            body = w.robots[fault.robot]
            try:
                if fault.kind == "fall":
                    if body.penalized:
                        raise InvalidRobot("robot is penalized")
                    events = inject_fall(w, fault.robot, fault.duration)
                else:
                    events = penalize(w, fault.robot, fault.duration, "Scripted")
            except InvalidRobot as exc:
                self._emit("Event", now, event="FaultSkipped", source="fault", robot=fault.robot, reason=str(exc))
                return
            self._kernel_events(events, now)
        elif fault.kind == "place_ball":
            w.ball = BallState(fault.position)
            w.pinned_ball = fault.position if fault.pin else None
            self._emit("Event", now, event="BallPlaced", source="fault", position=fault.position, pin=fault.pin)
            if fault.pin and fault.duration is not None:
                self._schedule(now + fault.duration, "unpin")
        else:
            bus = self.buses[fault.team]
            for receiver in fault.receivers:
                bus.link_loss[(fault.sender, receiver)] = fault.loss
                if fault.duration is not None:
                    self._schedule(now + fault.duration, "link_restore", (fault.team, fault.sender, receiver))
            self._emit("Event", now, event="LinkLoss", source="fault", team=fault.team, sender=fault.sender,
                       receivers=list(fault.receivers), loss=fault.loss)

    def _kernel_events(self, events: List[Event], now: float) -> None:
        for ev in events:
            self._emit("Event", ev.time, source="kernel", **ev.as_dict())
            self._count(f"event_{ev.kind}")
            agent = self.agents.get(ev.robot) if ev.robot is not None else None
            if ev.kind == "Penalized" and agent is not None:
                agent.view = SelfView(agent.spec.id, agent.spec.role, agent.belief, None, None, False, False)
                self._apply(agent, agent.tm.on_egress(ev.time, dict(ev.data).get("reason", "Penalized")), ev.time)
                # announce the egress right away instead of waiting for the next slot
                self._send(agent, compose_status(agent.tm, agent.view, ev.time), ev.time, "egress")
            elif ev.kind == "Returned" and agent is not None:
                self._apply(agent, agent.tm.on_return(ev.time), ev.time)
                true = pose_to_team_frame(agent.spec.team, self.world.robots[agent.spec.id].true_pose)
                agent.last_true = true
                if agent.localizer is not None:
                    agent.localizer.bank = _known_bank(true)
                    agent.localizer.estimate = true
                agent.belief = true

    # -- main loop -----------------------------------------------------------------

    def header(self) -> dict:
        f = self.f
        roster = []
        for rid in sorted(self.agents):
            a = self.agents[rid]
            roster.append({"id": rid, "team": a.spec.team, "role": a.spec.role, "task": a.tm.task})
        return {
            "schema": SCHEMA_VERSION,
            "scenario": self.sc.name,
            "seed": self.sc.seed,
            "duration": self.sc.duration,
            "teamplay": self.sc.teamplay,
            "dt": self.kcfg.dt,
            "control_period": self.kcfg.dt * self.kcfg.control_every,
            "bus_period": self.sc.bus.period,
            "staleness": self.sc.bus.staleness,
            "loss": self.sc.bus.loss,
            "illegal_defense_limit": self.kcfg.illegal_defense_limit,
            "refereed_teams": list(self.world.refereed_teams),
            "teams": list(TEAMS),
            "phase": self.world.gc_phase,
            "field": {k: getattr(f, k) for k in f.__dataclass_fields__},
            "roster": roster,
            "ball": list(self.world.ball.position),
        }

    def run(self) -> RunResult:
        header = self._emit("Header", 0.0, **self.header())
        self.checker = Checker(header)
        world = self.world
        n_steps = int(round(self.sc.duration / self.kcfg.dt))
        for k in range(n_steps):
            now = world.time
            self._apply_faults(now)
            for team in self.teams:
                bus = self.buses[team]
                for r in self.sc.team(team):
                    agent = self.agents[r.id]
                    for msg in bus.take_negotiation(r.id, now):
                        self._apply(agent, agent.tm.handle_negotiation(now, msg, agent.view), now)
            if k % self.kcfg.control_every == 0:
                rows, goalies = [], []
                for team in self.teams:
                    r_, g_ = self._control(team, now)
                    rows.extend(r_)
                    goalies.extend(g_)
                self._emit("Tick", now, phase=world.gc_phase, ball=list(world.ball.position), score=dict(world.score),
                           robots=rows, goalies=goalies)
            for team in self.teams:
                bus = self.buses[team]
                for r in self.sc.team(team):
                    if bus.due(r.id, now):
                        agent = self.agents[r.id]
                        self._send(agent, compose_status(agent.tm, agent.view, now), now, "status")
            commands = {}
            for rid, agent in self.agents.items():
                if agent.command is not None:
                    commands[rid] = agent.command
                    # kicks and dives are one-shot; walking persists until the next control tick
                    if agent.command.kick is not None or agent.command.dive is not None:
                        c = agent.command
                        agent.command = RobotCommand(c.vx, c.vy, c.omega)
            _, events = step(world, commands)
            self._kernel_events(events, world.time)
        end = world.time
        for finding in self.checker.finish(end):
            self._violation(finding)
        summary = self.summary()
        self._emit("End", end, summary=summary)
        return RunResult(summary, list(self.findings), self.records)

    def summary(self) -> dict:
        c = self.counts
        by_rule: Dict[str, int] = {}
        for f in self.findings:
            by_rule[f.rule] = by_rule.get(f.rule, 0) + 1
        periods = []
        for times in self.broadcast_times.values():
            periods.extend(b - a for a, b in zip(times, times[1:]))
        errs = sorted(self.loc_errors)
        loc = {"samples": len(errs)}
        if errs:
            loc.update(mean=statistics.fmean(errs), median=statistics.median(errs),
                       p95=errs[min(len(errs) - 1, int(0.95 * len(errs)))], max=errs[-1])
        return {
            "duration": self.world.time,
            "goals": dict(self.world.score),
            "task_changes": self.task_changes,
            "negotiation": {
                "requests": c.get("sent_Request", 0),
                "accepts": c.get("sent_Accept", 0),
                "rejects": c.get("sent_Reject", 0),
                "confirms": c.get("sent_Confirm", 0),
                "timeouts": c.get("note_NegotiationTimeout", 0),
                "inferred_confirms": c.get("note_ConfirmInferred", 0),
            },
            "clearouts": c.get("note_ClearOut", 0),
            "illegal_defense_events": c.get("event_IllegalDefense", 0),
            "penalties": c.get("event_Penalized", 0),
            "falls": c.get("event_Fall", 0),
            "kicks": c.get("event_Kick", 0),
            "messages": {"sent": c.get("messages_sent", 0), "dropped": c.get("messages_dropped", 0)},
            "broadcast_period_mean": statistics.fmean(periods) if periods else None,
            "localization_error": loc,
            "violations": by_rule,
            "safety_violations": sum(v for k, v in by_rule.items() if k in SAFETY_RULES),
        }


def run_scenario(scenario: Scenario, out: Optional[IO[str]] = None, keep_records: bool = False) -> RunResult:
    return Runner(scenario, out, keep_records).run()
