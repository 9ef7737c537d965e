"""Deterministic discrete-time soccer world.

The kernel owns the ground truth and is the only writer of
:class:`WorldState`. World coordinates coincide with the blue team's field
frame; the red team's frame is the half-turn rotation of it, so every team
defends the goal at its own -x.
"""
from __future__ import annotations

import copy
import enum
import math
import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .geometry import FieldModel, Point, Pose2D, clamp, dist, point_segment_distance, unit
from .tasks import Role

TIME_EPS = 1e-9


class InvalidCommand(ValueError):
    pass


class InvalidRobot(ValueError):
    pass


class NoContact(RuntimeError):
    """The ball is out of the kicker's reach."""


class GCPhase(str, enum.Enum):
    Initial = "Initial"
    Ready = "Ready"
    Set = "Set"
    Playing = "Playing"
    Finished = "Finished"


class KickStrength(str, enum.Enum):
    Dribble = "Dribble"
    Kick = "Kick"


TEAMS = ("blue", "red")


def other_team(team: str) -> str:
    return "red" if team == "blue" else "blue"


def to_team_frame(team: str, p: Point) -> Point:
    return p if team == "blue" else (-p[0], -p[1])


def pose_to_team_frame(team: str, pose: Pose2D) -> Pose2D:
    return pose if team == "blue" else pose.rotated_half_turn()


# The half-turn is its own inverse.
from_team_frame = to_team_frame
pose_from_team_frame = pose_to_team_frame


@dataclass(frozen=True)
class KernelConfig:
    dt: float = 0.02
    control_every: int = 6
    vx_max: float = 0.25
    vy_max: float = 0.15
    omega_max: float = 1.0
    ball_decay: float = 0.8
    ball_stop_speed: float = 1e-3
    dribble_speed: float = 0.8
    kick_speed: float = 2.5
    kick_reach: float = 0.3
    foot_offset: float = 0.15
    aim_sigma: float = 0.0
    robot_radius: float = 0.2
    ball_radius: float = 0.07
    restitution: float = 0.3
    getup_delay: float = 4.0
    illegal_defense_limit: float = 10.0
    illegal_defense_penalty: float = 30.0
    dive_duration: float = 1.0
    dive_reach: float = 0.7
    ready_duration: float = 15.0
    set_duration: float = 2.0
    field_margin: float = 0.7

    @property
    def v_limit(self) -> float:
        return math.hypot(self.vx_max, self.vy_max)

    def strength_speed(self, strength: KickStrength) -> float:
        return self.kick_speed if strength is KickStrength.Kick else self.dribble_speed


@dataclass(frozen=True)
class KickCommand:
    direction: float  # world frame, rad
    strength: KickStrength = KickStrength.Kick


@dataclass(frozen=True)
class RobotCommand:
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    kick: Optional[KickCommand] = None
    dive: Optional[int] = None  # +1 left, -1 right of the robot


@dataclass
class RobotBody:
    id: int
    team: str
    role: Role
    true_pose: Pose2D
    velocity_cmd: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    fallen: bool = False
    fall_timer: float = 0.0
    penalized: bool = False
    penalty_timer: float = 0.0
    dive_timer: float = 0.0
    dive_side: int = 0

    @property
    def active(self) -> bool:
        return not self.penalized

    @property
    def can_move(self) -> bool:
        return not (self.penalized or self.fallen or self.dive_timer > 0.0)


@dataclass
class BallState:
    position: Point
    velocity: Point = (0.0, 0.0)

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    robot: Optional[int] = None
    team: Optional[str] = None
    data: Tuple[Tuple[str, object], ...] = ()

    def as_dict(self) -> dict:
        d = {"event": self.kind}
        if self.robot is not None:
            d["robot"] = self.robot
        if self.team is not None:
            d["team"] = self.team
        d.update(dict(self.data))
        return d


def _event(time: float, kind: str, robot: Optional[int] = None, team: Optional[str] = None, **data) -> Event:
    return Event(time, kind, robot, team, tuple(sorted(data.items())))


@dataclass
class WorldState:
    field: FieldModel
    config: KernelConfig
    robots: Dict[int, RobotBody]
    ball: BallState
    rng: random.Random
    gc_phase: GCPhase = GCPhase.Playing
    phase_timer: float = 0.0
    step_index: int = 0
    kickoff_team: str = "blue"
    score: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in TEAMS})
    illegal_defense_steps: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in TEAMS})
    illegal_defense_onset: Dict[str, Optional[float]] = field(default_factory=lambda: {t: None for t in TEAMS})
    occupancy: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in TEAMS})
    pinned_ball: Optional[Point] = None
    # Teams whose goal area is refereed for illegal defense.
    refereed_teams: Tuple[str, ...] = TEAMS

    @property
    def time(self) -> float:
        return self.step_index * self.config.dt

    @property
    def illegal_defense_timers(self) -> Dict[str, float]:
        return {t: n * self.config.dt for t, n in self.illegal_defense_steps.items()}

    def snapshot(self) -> "WorldState":
        return copy.deepcopy(self)

    def team_robots(self, team: str) -> List[RobotBody]:
        return [self.robots[i] for i in sorted(self.robots) if self.robots[i].team == team]


def new_world(
    field_model: FieldModel,
    robots: Sequence[RobotBody],
    ball: Point = (0.0, 0.0),
    seed: int = 0,
    config: KernelConfig = KernelConfig(),
    phase: GCPhase = GCPhase.Playing,
    refereed_teams: Sequence[str] = TEAMS,
) -> WorldState:
    ids = [r.id for r in robots]
    if len(set(ids)) != len(ids):
        raise InvalidRobot("duplicate robot ids")
    w = WorldState(
        field=field_model,
        config=config,
        robots={r.id: r for r in robots},
        ball=BallState(ball),
        rng=random.Random(seed),
        gc_phase=phase,
        refereed_teams=tuple(refereed_teams),
    )
    if phase is GCPhase.Ready:
        w.phase_timer = config.ready_duration
    elif phase is GCPhase.Set:
        w.phase_timer = config.set_duration
    for t in TEAMS:
        w.occupancy[t] = _occupancy(w, t)
    return w


# ---------------------------------------------------------------------------


def foot_point(pose: Pose2D, cfg: KernelConfig) -> Point:
    return pose.to_field((cfg.foot_offset, 0.0))


def apply_kick(
    ball: BallState,
    kicker_pose: Pose2D,
    kick: KickCommand,
    cfg: KernelConfig = KernelConfig(),
    rng: Optional[random.Random] = None,
) -> BallState:
    """Set the ball velocity from a kick; raises :class:`NoContact` when out of reach."""
    if dist(ball.position, foot_point(kicker_pose, cfg)) > cfg.kick_reach + TIME_EPS:
        raise NoContact(f"ball {dist(ball.position, foot_point(kicker_pose, cfg)):.3f} m from foot")
    direction = kick.direction
    if cfg.aim_sigma > 0.0 and rng is not None:
        direction += rng.gauss(0.0, cfg.aim_sigma)
    speed = cfg.strength_speed(kick.strength)
    return BallState(ball.position, (speed * math.cos(direction), speed * math.sin(direction)))


def inject_fall(world: WorldState, robot_id: int, duration: float) -> List[Event]:
    robot = world.robots.get(robot_id)
    if robot is None or robot.fallen:
        raise InvalidRobot(f"cannot fell robot {robot_id}")
    robot.fallen = True
    robot.fall_timer = duration
    robot.velocity_cmd = (0.0, 0.0, 0.0)
    return [_event(world.time, "Fall", robot.id, robot.team, duration=duration)]


def penalize(world: WorldState, robot_id: int, duration: float, reason: str) -> List[Event]:
    """Remove a robot from play for ``duration`` seconds."""
    robot = world.robots.get(robot_id)
    if robot is None or robot.penalized:
        raise InvalidRobot(f"cannot penalize robot {robot_id}")
    robot.penalized = True
    robot.penalty_timer = duration
    robot.fallen = False
    robot.fall_timer = 0.0
    robot.dive_timer = 0.0
    robot.velocity_cmd = (0.0, 0.0, 0.0)
    f = world.field
    side = 1.0 if robot.id % 2 == 0 else -1.0
    robot.true_pose = pose_from_team_frame(robot.team, Pose2D(-f.length / 4, side * (f.half_width + 0.5), -side * math.pi / 2))
    return [_event(world.time, "Penalized", robot.id, robot.team, reason=reason, duration=duration)]


def _return_to_play(world: WorldState, robot: RobotBody) -> Event:
    f = world.field
    side = 1.0 if robot.id % 2 == 0 else -1.0
    robot.penalized = False
    robot.penalty_timer = 0.0
    robot.true_pose = pose_from_team_frame(robot.team, Pose2D(-f.length / 4, side * f.half_width, -side * math.pi / 2))
    return _event(world.time, "Returned", robot.id, robot.team)


def _in_own_area(world: WorldState, robot: RobotBody) -> bool:
    return world.field.in_own_goal_area(to_team_frame(robot.team, robot.true_pose.position))


def _occupancy(world: WorldState, team: str) -> int:
    return sum(1 for r in world.robots.values() if r.team == team and r.active and _in_own_area(world, r))


def _block_ball(world: WorldState, start: Point, end: Point) -> Optional[Tuple[Point, Point]]:
    """First robot the moving ball runs into: (contact point, reflected velocity)."""
    cfg = world.config
    v = world.ball.velocity
    hit: Optional[Tuple[float, Point, Point]] = None
    for rid in sorted(world.robots):
        robot = world.robots[rid]
        if robot.penalized:
            continue
        c = robot.true_pose.position
        reach = cfg.robot_radius + cfg.ball_radius
        blockers = [(c, c)]
        if robot.dive_timer > 0.0:
            blockers = [(c, robot.true_pose.to_field((0.0, robot.dive_side * cfg.dive_reach)))]
        for a, b in blockers:
            d_end = point_segment_distance(end, a, b)
            if d_end >= reach:
                continue
            # Closest point of the blocker to the ball's end position decides the normal.
            near = min((a, b), key=lambda q: dist(q, end)) if a == b else _closest(end, a, b)
            n = unit((end[0] - near[0], end[1] - near[1])) or unit((start[0] - near[0], start[1] - near[1]))
            if n is None:
                continue
            vn = v[0] * n[0] + v[1] * n[1]
            if vn >= 0.0:
                continue  # already moving away
            d0 = dist(start, near)
            if hit is None or d0 < hit[0]:
                rv = (v[0] - 2 * vn * n[0], v[1] - 2 * vn * n[1])
                rv = (rv[0] * cfg.restitution, rv[1] * cfg.restitution)
                contact = (near[0] + n[0] * reach, near[1] + n[1] * reach)
                hit = (d0, contact, rv)
    if hit is None:
        return None
    return hit[1], hit[2]


def _closest(p: Point, a: Point, b: Point) -> Point:
    from .geometry import closest_point_on_segment

    return closest_point_on_segment(p, a, b)


def _move_robot(world: WorldState, robot: RobotBody, cmd: RobotCommand) -> None:
    cfg = world.config
    vx = clamp(cmd.vx, -cfg.vx_max, cfg.vx_max)
    vy = clamp(cmd.vy, -cfg.vy_max, cfg.vy_max)
    om = clamp(cmd.omega, -cfg.omega_max, cfg.omega_max)
    robot.velocity_cmd = (vx, vy, om)
    dt = cfg.dt
    pose = robot.true_pose.compose(vx * dt, vy * dt, om * dt)
    f = world.field
    m = cfg.field_margin
    x = clamp(pose.x, -f.half_length - m, f.half_length + m)
    y = clamp(pose.y, -f.half_width - m, f.half_width + m)
    robot.true_pose = Pose2D(x, y, pose.theta)


def step(world: WorldState, commands: Mapping[int, RobotCommand], dt: Optional[float] = None) -> Tuple[WorldState, List[Event]]:
    """Advance the world by one tick in place and return it with the tick's events."""
    cfg = world.config
    if dt is not None and abs(dt - cfg.dt) > 1e-12:
        raise ValueError(f"kernel runs at a fixed dt={cfg.dt}")
    unknown = [rid for rid in commands if rid not in world.robots]
    if unknown:
        raise InvalidCommand(f"commands for unknown robots {sorted(unknown)}")
    world.step_index += 1
    now = world.time
    events: List[Event] = []
    playing = world.gc_phase is GCPhase.Playing

    for rid in sorted(world.robots):
        robot = world.robots[rid]
        if robot.penalized:
            robot.penalty_timer -= cfg.dt
            if robot.penalty_timer <= TIME_EPS:
                events.append(_return_to_play(world, robot))
            continue
        if robot.fallen:
            robot.velocity_cmd = (0.0, 0.0, 0.0)
            robot.fall_timer -= cfg.dt
            if robot.fall_timer <= TIME_EPS:
                robot.fallen = False
                robot.fall_timer = 0.0
                events.append(_event(now, "GetUp", rid, robot.team))
            continue
        if robot.dive_timer > 0.0:
            robot.velocity_cmd = (0.0, 0.0, 0.0)
            robot.dive_timer -= cfg.dt
            if robot.dive_timer <= TIME_EPS:
                robot.dive_timer = 0.0
                robot.dive_side = 0
            continue
        cmd = commands.get(rid)
        if cmd is None:
            robot.velocity_cmd = (0.0, 0.0, 0.0)
            continue
        if cmd.dive is not None and robot.role is Role.Goalkeeper and playing:
            robot.dive_timer = cfg.dive_duration
            robot.dive_side = 1 if cmd.dive > 0 else -1
            robot.velocity_cmd = (0.0, 0.0, 0.0)
            events.append(_event(now, "Dive", rid, robot.team, side=robot.dive_side))
            continue
        if world.gc_phase in (GCPhase.Playing, GCPhase.Ready):
            _move_robot(world, robot, cmd)
        else:
            robot.velocity_cmd = (0.0, 0.0, 0.0)
        if cmd.kick is not None and playing:
            try:
                world.ball = apply_kick(world.ball, robot.true_pose, cmd.kick, cfg, world.rng)
                events.append(_event(now, "Kick", rid, robot.team, strength=cmd.kick.strength.value, direction=cmd.kick.direction))
            except NoContact:
                events.append(_event(now, "NoContact", rid, robot.team))

    events.extend(_step_ball(world, now))
    events.extend(_referee(world, now))
    events.extend(_advance_phase(world, now))
    return world, events


def _step_ball(world: WorldState, now: float) -> List[Event]:
    cfg = world.config
    ball = world.ball
    if world.pinned_ball is not None:
        world.ball = BallState(world.pinned_ball, (0.0, 0.0))
        return []
    if ball.velocity == (0.0, 0.0):
        return []
    start = ball.position
    end = (start[0] + ball.velocity[0] * cfg.dt, start[1] + ball.velocity[1] * cfg.dt)
    blocked = _block_ball(world, start, end)
    if blocked is not None:
        end, velocity = blocked
    else:
        velocity = ball.velocity
    decay = math.exp(-cfg.ball_decay * cfg.dt)
    velocity = (velocity[0] * decay, velocity[1] * decay)
    if math.hypot(*velocity) < cfg.ball_stop_speed:
        velocity = (0.0, 0.0)
    world.ball = BallState(end, velocity)
    return _ball_out(world, now)


def _ball_out(world: WorldState, now: float) -> List[Event]:
    f = world.field
    x, y = world.ball.position
    if abs(x) > f.half_length:
        if abs(y) <= f.goal_width / 2:
            scorer = "blue" if x > 0 else "red"
            world.score[scorer] += 1
            world.ball = BallState((0.0, 0.0))
            world.kickoff_team = other_team(scorer)
            world.gc_phase = GCPhase.Ready
            world.phase_timer = world.config.ready_duration
            return [
                _event(now, "Goal", team=scorer, score=dict(world.score)),
                _event(now, "PhaseChange", phase=GCPhase.Ready.value, kickoff=world.kickoff_team),
            ]
        world.ball = BallState((clamp(x, -f.half_length, f.half_length), clamp(y, -f.half_width, f.half_width)))
        return [_event(now, "BallOut", position=list(world.ball.position))]
    if abs(y) > f.half_width:
        vx, vy = world.ball.velocity
        # Exit point on the touch line along the last motion.
        exit_x = x
        if vy != 0.0:
            exit_x = x - vx * (abs(y) - f.half_width) / abs(vy)
        world.ball = BallState((clamp(exit_x, -f.half_length, f.half_length), math.copysign(f.half_width, y)))
        return [_event(now, "BallOut", position=list(world.ball.position))]
    return []


def _referee(world: WorldState, now: float) -> List[Event]:
    """Occupancy bookkeeping and the illegal-defense timer.

    The timer counts every tick that ends with two or more robots of a team
    in their own goal area (the tick that starts the occupancy counts as
    one ``dt``) and fires once the count exceeds the limit.
    """
    cfg = world.config
    events: List[Event] = []
    for team in TEAMS:
        n = _occupancy(world, team)
        if n != world.occupancy[team]:
            events.append(_event(now, "AreaOccupancy", team=team, count=n))
            world.occupancy[team] = n
        if team not in world.refereed_teams or world.gc_phase is not GCPhase.Playing:
            world.illegal_defense_steps[team] = 0
            world.illegal_defense_onset[team] = None
            continue
        if n < 2:
            world.illegal_defense_steps[team] = 0
            world.illegal_defense_onset[team] = None
            continue
        if world.illegal_defense_onset[team] is None:
            world.illegal_defense_onset[team] = now
        world.illegal_defense_steps[team] += 1
        if world.illegal_defense_steps[team] * cfg.dt > cfg.illegal_defense_limit + TIME_EPS:
            onset = world.illegal_defense_onset[team]
            events.append(_event(now, "IllegalDefense", team=team, onset=onset, held=world.illegal_defense_steps[team] * cfg.dt))
            offenders = [
                r for r in sorted(world.team_robots(team), key=lambda r: -r.id)
                if r.active and r.role is not Role.Goalkeeper and _in_own_area(world, r)
            ]
            for robot in offenders:
                if _occupancy(world, team) <= 1:
                    break
                events.extend(penalize(world, robot.id, cfg.illegal_defense_penalty, "IllegalDefense"))
            world.illegal_defense_steps[team] = 0
            world.illegal_defense_onset[team] = None
            n = _occupancy(world, team)
            if n != world.occupancy[team]:
                events.append(_event(now, "AreaOccupancy", team=team, count=n))
                world.occupancy[team] = n
    return events


def _advance_phase(world: WorldState, now: float) -> List[Event]:
    if world.gc_phase not in (GCPhase.Ready, GCPhase.Set):
        return []
    world.phase_timer -= world.config.dt
    if world.phase_timer > TIME_EPS:
        return []
    if world.gc_phase is GCPhase.Ready:
        world.gc_phase = GCPhase.Set
        world.phase_timer = world.config.set_duration
        world.ball = BallState((0.0, 0.0))
    else:
        world.gc_phase = GCPhase.Playing
        world.phase_timer = 0.0
    return [_event(now, "PhaseChange", phase=world.gc_phase.value, kickoff=world.kickoff_team)]


def set_phase(world: WorldState, phase: GCPhase) -> List[Event]:
    world.gc_phase = phase
    world.phase_timer = {GCPhase.Ready: world.config.ready_duration, GCPhase.Set: world.config.set_duration}.get(phase, 0.0)
    return [_event(world.time, "PhaseChange", phase=phase.value, kickoff=world.kickoff_team)]


# ---------------------------------------------------------------------------
# Kickoff formation


def auto_position_targets(robots: Sequence[Tuple[int, Role]], f: FieldModel, kickoff: bool) -> Dict[int, Pose2D]:
    """Legal kickoff poses in the team frame, assigned by robot id.

    The goalkeeper takes the goal line; field players fill, in id order, the
    kicker slot (circle edge when kicking off, otherwise behind the circle),
    a defensive slot and a wing slot.
    """
    goal_line = Pose2D(-f.half_length + 0.25, 0.0, 0.0)
    r = f.center_circle_radius
    slots = [
        Pose2D(-r, 0.0, 0.0) if kickoff else Pose2D(-(r + 0.75), 0.0, 0.0),
        Pose2D(-f.half_length / 2 - 0.5, -1.0, 0.0),
        Pose2D(-f.half_length / 2, 1.5, 0.0),
    ]
    out: Dict[int, Pose2D] = {}
    field_ids = sorted(rid for rid, role in robots if role is not Role.Goalkeeper)
    for rid, role in robots:
        if role is Role.Goalkeeper:
            out[rid] = goal_line
    for k, rid in enumerate(field_ids):
        out[rid] = slots[k] if k < len(slots) else Pose2D(-f.half_length / 2, -2.0 + 0.5 * k, 0.0)
    return out
