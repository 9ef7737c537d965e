"""Two-layer behavior control.

The Game FSM picks a posture from the game-controller phase and the task;
the Behavior FSM runs skills (search, approach, dribble, kick, ...) inside
that posture. Everything here works in the robot's team frame and is a pure
function of the belief snapshot and the controller memory.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .geometry import (
    DefenderParams,
    FieldModel,
    Point,
    Pose2D,
    WaitClearOutParams,
    clamp,
    defender_target_pose,
    dist,
    heading_to,
    keep_out_of_goal_area,
    normalize_angle,
    point_segment_distance,
    surround_path,
    unit,
    wait_clearout_target,
)
from .netcomms import TeamMessage
from .simkernel import GCPhase, KickStrength
from .tasks import Role, Task

TWO_PI = 2.0 * math.pi


class BehaviorState(str, enum.Enum):
    SearchBall = "SearchBall"
    GoToBall = "GoToBall"
    Dribble = "Dribble"
    Kick = "Kick"
    GoToPose = "GoToPose"
    TrackBallLaterally = "TrackBallLaterally"
    Dive = "Dive"
    Idle = "Idle"


class GameState(str, enum.Enum):
    DefaultBallHandling = "DefaultBallHandling"
    Positioning = "Positioning"
    DefendPosture = "DefendPosture"
    KeepGoalPosture = "KeepGoalPosture"
    WaitClearOutPosture = "WaitClearOutPosture"
    Stopped = "Stopped"


class UndefinedTransition(RuntimeError):
    pass


_BALL_CONTACT = frozenset({BehaviorState.GoToBall, BehaviorState.Kick, BehaviorState.Dribble})
_ALL = frozenset(BehaviorState)
# Kick and Dribble are only entered from an approach; every other skill can
# be entered from anywhere because postures change with the game.
TRANSITIONS: Dict[BehaviorState, FrozenSet[BehaviorState]] = {
    s: (_ALL if s in _BALL_CONTACT else _ALL - {BehaviorState.Kick, BehaviorState.Dribble}) for s in BehaviorState
}


@dataclass(frozen=True)
class BehaviorConfig:
    standoff: float = 0.4
    kick_align_tol: float = 0.2
    rough_align_tol: float = 0.5
    ball_avoid_radius: float = 0.3
    corridor_check_length: float = 2.0
    corridor_halfwidth: float = 0.3
    approach_tolerance: float = 0.12
    foot_offset: float = 0.15
    kick_reach: float = 0.27
    goal_post_margin: float = 0.15
    obstacle_radius: float = 0.25
    teammate_clearance: float = 0.5
    goal_line_offset: float = 0.3
    position_tolerance: float = 0.1
    search_turn_rate: float = 0.8
    control_period: float = 0.12
    position_gain: float = 1.5
    turn_gain: float = 2.0
    vx_max: float = 0.25
    vy_max: float = 0.15
    omega_max: float = 1.0
    face_travel_distance: float = 1.0
    dribble_deflection: float = 0.8  # rad off the aim line when the corridor is blocked


@dataclass(frozen=True)
class MotionCommand:
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    kick_direction: Optional[float] = None  # team frame
    kick_strength: Optional[KickStrength] = None
    dive: Optional[int] = None


STOP = MotionCommand()


@dataclass(frozen=True)
class BeliefSnapshot:
    believed_pose: Pose2D
    ball_visible: bool = False
    ball_est: Optional[Point] = None
    ball_last_seen: Optional[Tuple[Point, float]] = None
    obstacles: Tuple[Point, ...] = ()
    inbox: Tuple[TeamMessage, ...] = ()
    assigned_task: Task = Task.Defend
    gc_phase: GCPhase = GCPhase.Playing
    time: float = 0.0
    robot_id: int = 0
    role: Role = Role.FieldPlayer
    positioning_target: Optional[Pose2D] = None

    def __post_init__(self) -> None:
        if self.ball_visible and self.ball_est is None:
            raise ValueError("a visible ball needs an estimate")
        if self.role is Role.Goalkeeper and self.assigned_task not in (Task.KeepGoal,):
            raise ValueError("goalkeeper belief must carry KeepGoal")


# ---------------------------------------------------------------------------
# Game FSM


def game_fsm_step(belief: BeliefSnapshot, previous: GameState = GameState.Stopped) -> GameState:
    phase = belief.gc_phase
    if phase is GCPhase.Ready:
        return GameState.Positioning
    if phase is not GCPhase.Playing:
        return GameState.Stopped
    task = belief.assigned_task
    if task is Task.ChangeTask:
        return previous
    return {
        Task.Attack: GameState.DefaultBallHandling,
        Task.Defend: GameState.DefendPosture,
        Task.KeepGoal: GameState.KeepGoalPosture,
        Task.WaitClearOut: GameState.WaitClearOutPosture,
    }[task]


# ---------------------------------------------------------------------------
# Motion primitives


def drive_to(pose: Pose2D, target: Point, heading: float, cfg: BehaviorConfig = BehaviorConfig()) -> MotionCommand:
    """Proportional omnidirectional walk toward ``target`` ending at ``heading``."""
    rel = pose.to_local(target)
    gx, gy = cfg.position_gain * rel[0], cfg.position_gain * rel[1]
    s = 1.0
    if abs(gx) > cfg.vx_max:
        s = min(s, cfg.vx_max / abs(gx))
    if abs(gy) > cfg.vy_max:
        s = min(s, cfg.vy_max / abs(gy))
    d = math.hypot(*rel)
    face = heading if d <= cfg.face_travel_distance else heading_to(pose.position, target)
    err = normalize_angle(face - pose.theta)
    omega = clamp(cfg.turn_gain * err, -cfg.omega_max, cfg.omega_max)
    return MotionCommand(gx * s, gy * s, omega)


def follow_path(pose: Pose2D, goal: Pose2D, obstacles: Sequence[Tuple[Point, float]], cfg: BehaviorConfig) -> MotionCommand:
    if dist(pose.position, goal.position) < 1e-9:
        return drive_to(pose, goal.position, goal.theta, cfg)
    path = surround_path(pose.position, goal.position, list(obstacles))
    waypoint = path.points[1] if len(path.points) > 1 else goal.position
    if len(path.points) > 2:
        return drive_to(pose, waypoint, heading_to(pose.position, waypoint), cfg)
    return drive_to(pose, waypoint, goal.theta, cfg)


# ---------------------------------------------------------------------------
# Search


class SearchPhase(str, enum.Enum):
    LastSeen = "LastSeen"
    Turn = "Turn"
    NearMark = "NearMark"
    TurnNear = "TurnNear"
    FarMark = "FarMark"
    TurnFar = "TurnFar"


_NEXT_PHASE = {
    SearchPhase.LastSeen: SearchPhase.Turn,
    SearchPhase.Turn: SearchPhase.NearMark,
    SearchPhase.NearMark: SearchPhase.TurnNear,
    SearchPhase.TurnNear: SearchPhase.FarMark,
    SearchPhase.FarMark: SearchPhase.TurnFar,
    SearchPhase.TurnFar: SearchPhase.Turn,
}


@dataclass(frozen=True)
class SearchMemory:
    phase: Optional[SearchPhase] = None
    turned: float = 0.0
    near: Optional[Point] = None
    far: Optional[Point] = None
    target: Optional[Point] = None


def _enter(phase: SearchPhase, pose: Pose2D, f: FieldModel, mem: SearchMemory) -> SearchMemory:
    if phase is SearchPhase.NearMark:
        a, b = f.penalty_marks
        near, far = (a, b) if dist(pose.position, a) <= dist(pose.position, b) else (b, a)
        return SearchMemory(phase, 0.0, near, far, near)
    if phase is SearchPhase.FarMark:
        return SearchMemory(phase, 0.0, mem.near, mem.far, mem.far)
    return SearchMemory(phase, 0.0, mem.near, mem.far, mem.target if phase is SearchPhase.LastSeen else None)


def search_ball_step(belief: BeliefSnapshot, memory: SearchMemory, f: FieldModel, cfg: BehaviorConfig = BehaviorConfig()) -> Tuple[MotionCommand, SearchMemory]:
    """One tick of ball search: last-seen spot, turn, near mark, turn, far mark, turn, repeat."""
    pose = belief.believed_pose
    mem = memory
    if mem.phase is None:
        if belief.ball_last_seen is not None:
            mem = SearchMemory(SearchPhase.LastSeen, 0.0, None, None, belief.ball_last_seen[0])
        else:
            mem = SearchMemory(SearchPhase.Turn)
    for _ in range(len(SearchPhase)):
        if mem.phase in (SearchPhase.LastSeen, SearchPhase.NearMark, SearchPhase.FarMark):
            if dist(pose.position, mem.target) <= cfg.position_tolerance:
                mem = _enter(_NEXT_PHASE[mem.phase], pose, f, mem)
                continue
            return drive_to(pose, mem.target, heading_to(pose.position, mem.target), cfg), mem
        if mem.turned >= TWO_PI - 1e-9:
            mem = _enter(_NEXT_PHASE[mem.phase], pose, f, mem)
            continue
        rate = cfg.search_turn_rate
        return MotionCommand(0.0, 0.0, rate), replace(mem, turned=mem.turned + rate * cfg.control_period)
    return STOP, mem


# ---------------------------------------------------------------------------
# Ball handling


def kick_aim_point(ball: Point, obstacles: Sequence[Point], f: FieldModel, cfg: BehaviorConfig = BehaviorConfig()) -> Point:
    """Open point of the opponent goal mouth nearest its center.

    Each obstacle in front of the ball shadows an interval of the goal
    line; the aim is the unshadowed point closest to the goal center, or
    the center itself when the mouth is fully covered.
    """
    gx = f.half_length
    lo = -f.goal_width / 2 + cfg.goal_post_margin
    hi = f.goal_width / 2 - cfg.goal_post_margin
    shadows: List[Tuple[float, float]] = []
    for o in obstacles:
        dx, dy = o[0] - ball[0], o[1] - ball[1]
        d = math.hypot(dx, dy)
        if dx <= 0 or o[0] >= gx or d <= cfg.obstacle_radius:
            continue
        center = math.atan2(dy, dx)
        half = math.asin(min(1.0, cfg.obstacle_radius / d))
        edge = math.pi / 2 - 1e-6
        a0 = clamp(center - half, -edge, edge)
        a1 = clamp(center + half, -edge, edge)
        shadows.append((ball[1] + (gx - ball[0]) * math.tan(a0), ball[1] + (gx - ball[0]) * math.tan(a1)))
    candidates = [clamp(0.0, lo, hi), lo, hi]
    for s0, s1 in shadows:
        candidates.extend(y for y in (s0, s1) if lo <= y <= hi)
    open_pts = [y for y in candidates if not any(s0 < y < s1 for s0, s1 in shadows)]
    if not open_pts:
        return (gx, 0.0)
    return (gx, min(open_pts, key=lambda y: (abs(y), y)))


def approach_ball_target(belief: BeliefSnapshot, kick_target: Point, cfg: BehaviorConfig = BehaviorConfig()) -> Pose2D:
    ball = belief.ball_est
    if ball is None:
        raise ValueError("approach needs a ball estimate")
    u = unit((kick_target[0] - ball[0], kick_target[1] - ball[1])) or (1.0, 0.0)
    return Pose2D(ball[0] - cfg.standoff * u[0], ball[1] - cfg.standoff * u[1], math.atan2(u[1], u[0]))


def approach_path(belief: BeliefSnapshot, kick_target: Point, cfg: BehaviorConfig = BehaviorConfig()):
    """Planned path to the behind-ball pose with the ball as an obstacle."""
    target = approach_ball_target(belief, kick_target, cfg)
    obstacles = [(belief.ball_est, cfg.ball_avoid_radius)] + [(o, cfg.teammate_clearance) for o in belief.obstacles]
    return surround_path(belief.believed_pose.position, target.position, obstacles)


class ShotChoice(str, enum.Enum):
    Kick = "Kick"
    Dribble = "Dribble"


def corridor_clear(ball: Point, aim: Point, obstacles: Sequence[Point], cfg: BehaviorConfig = BehaviorConfig()) -> bool:
    u = unit((aim[0] - ball[0], aim[1] - ball[1]))
    if u is None:
        return True
    end = (ball[0] + cfg.corridor_check_length * u[0], ball[1] + cfg.corridor_check_length * u[1])
    return all(point_segment_distance(o, ball, end) > cfg.corridor_halfwidth for o in obstacles)


def decide_kick_or_dribble(belief: BeliefSnapshot, f: FieldModel, cfg: BehaviorConfig = BehaviorConfig()) -> ShotChoice:
    ball = belief.ball_est
    aim = kick_aim_point(ball, belief.obstacles, f, cfg)
    err = abs(normalize_angle(heading_to(ball, aim) - belief.believed_pose.theta))
    if err <= cfg.kick_align_tol and corridor_clear(ball, aim, belief.obstacles, cfg):
        return ShotChoice.Kick
    return ShotChoice.Dribble


def in_kick_position(pose: Pose2D, ball: Point, target: Pose2D, cfg: BehaviorConfig) -> bool:
    foot = pose.to_field((cfg.foot_offset, 0.0))
    return (
        dist(pose.position, target.position) <= cfg.approach_tolerance
        and dist(foot, ball) <= cfg.kick_reach
        and abs(normalize_angle(target.theta - pose.theta)) <= cfg.rough_align_tol
    )


def _dribble_side(ball: Point, aim: Point, obstacles: Sequence[Point], cfg: BehaviorConfig) -> int:
    """Turn the dribble away from the nearest robot blocking the corridor (0 if none)."""
    u = unit((aim[0] - ball[0], aim[1] - ball[1]))
    if u is None:
        return 0
    end = (ball[0] + cfg.corridor_check_length * u[0], ball[1] + cfg.corridor_check_length * u[1])
    blocking = [o for o in obstacles if point_segment_distance(o, ball, end) <= cfg.corridor_halfwidth]
    if not blocking:
        return 0
    o = min(blocking, key=lambda p: dist(p, ball))
    cross = u[0] * (o[1] - ball[1]) - u[1] * (o[0] - ball[0])
    if abs(cross) > 1e-9:
        return -1 if cross > 0 else 1
    # dead ahead: go toward the roomier half of the field
    return -1 if ball[1] > 0 else 1


def _ball_handling(belief: BeliefSnapshot, previous: BehaviorState, f: FieldModel, cfg: BehaviorConfig, aim: Optional[Point] = None) -> Tuple[MotionCommand, BehaviorState, str]:
    pose, ball = belief.believed_pose, belief.ball_est
    aim = aim or kick_aim_point(ball, belief.obstacles, f, cfg)
    target = approach_ball_target(belief, aim, cfg)
    if previous in _BALL_CONTACT and in_kick_position(pose, ball, target, cfg):
        choice = decide_kick_or_dribble(belief, f, cfg) if aim[0] >= f.half_length else ShotChoice.Kick
        direction = heading_to(ball, aim)
        if choice is ShotChoice.Kick:
            return MotionCommand(kick_direction=direction, kick_strength=KickStrength.Kick), BehaviorState.Kick, "aligned, corridor clear"
        direction = normalize_angle(direction + _dribble_side(ball, aim, belief.obstacles, cfg) * cfg.dribble_deflection)
        u = (math.cos(direction), math.sin(direction))
        walk = pose.to_local((pose.x + u[0], pose.y + u[1]))
        cmd = MotionCommand(cfg.vx_max * 0.6 * walk[0], cfg.vy_max * 0.6 * walk[1], 0.0, direction, KickStrength.Dribble)
        return cmd, BehaviorState.Dribble, "dribbling toward aim"
    obstacles = [(ball, cfg.ball_avoid_radius)] + [(o, cfg.teammate_clearance) for o in belief.obstacles]
    return follow_path(pose, target, obstacles, cfg), BehaviorState.GoToBall, "approaching behind the ball"


# ---------------------------------------------------------------------------
# Goalkeeper


def goalkeeper_hold_target(ball: Optional[Point], f: FieldModel, cfg: BehaviorConfig = BehaviorConfig()) -> Pose2D:
    x = -f.half_length + cfg.goal_line_offset
    y = 0.0 if ball is None else clamp(ball[1], -f.goal_width / 2, f.goal_width / 2)
    theta = 0.0 if ball is None or dist((x, y), ball) < 1e-9 else heading_to((x, y), ball)
    return Pose2D(x, y, theta)


def goalkeeper_step(
    belief: BeliefSnapshot,
    f: FieldModel,
    clearout_signal: bool,
    dive_signal: Optional[int],
    cfg: BehaviorConfig = BehaviorConfig(),
    previous: BehaviorState = BehaviorState.Idle,
) -> Tuple[MotionCommand, BehaviorState, str]:
    if dive_signal is not None:
        return MotionCommand(dive=1 if dive_signal > 0 else -1), BehaviorState.Dive, "dive signal"
    ball = belief.ball_est
    if clearout_signal and ball is not None:
        return _ball_handling(belief, previous, f, cfg, aim=f.opponent_goal_center)
    target = goalkeeper_hold_target(ball, f, cfg)
    pose = belief.believed_pose
    # lateral hold: move in the field frame, then express in the body frame
    ex = clamp(cfg.position_gain * (target.x - pose.x), -cfg.vx_max, cfg.vx_max)
    ey = clamp(cfg.position_gain * (target.y - pose.y), -cfg.vy_max, cfg.vy_max)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    vx, vy = c * ex + s * ey, -s * ex + c * ey
    scale = min(1.0, cfg.vx_max / abs(vx) if abs(vx) > cfg.vx_max else 1.0, cfg.vy_max / abs(vy) if abs(vy) > cfg.vy_max else 1.0)
    omega = clamp(cfg.turn_gain * normalize_angle(target.theta - pose.theta), -cfg.omega_max, cfg.omega_max)
    reason = "gaze at ball" if ball is not None else "hold goal center"
    return MotionCommand(vx * scale, vy * scale, omega), BehaviorState.TrackBallLaterally, reason


# ---------------------------------------------------------------------------
# Controller


@dataclass
class BehaviorMemory:
    state: BehaviorState = BehaviorState.Idle
    game_state: GameState = GameState.Stopped
    search: SearchMemory = field(default_factory=SearchMemory)
    target: Optional[Pose2D] = None


@dataclass(frozen=True)
class StepOutput:
    command: MotionCommand
    state: BehaviorState
    game_state: GameState
    reason: str
    transition: bool


class BehaviorController:
    """Per-robot controller; ``step`` is the only mutator of its memory."""

    def __init__(self, robot_id: int, role: Role, field_model: FieldModel, config: BehaviorConfig = BehaviorConfig(),
                 defender: DefenderParams = DefenderParams(), waiting: WaitClearOutParams = WaitClearOutParams()):
        self.id = robot_id
        self.role = role
        self.field = field_model
        self.config = config
        self.defender = defender
        self.waiting = waiting
        self.memory = BehaviorMemory()

    def step(self, belief: BeliefSnapshot, clearout_signal: bool = False, dive_signal: Optional[int] = None) -> StepOutput:
        mem = self.memory
        game = game_fsm_step(belief, mem.game_state)
        cmd, state, reason, target = self._skill(belief, game, clearout_signal, dive_signal)
        if state not in TRANSITIONS[mem.state]:
            raise UndefinedTransition(f"{mem.state.value} -> {state.value}")
        changed = state is not mem.state or game is not mem.game_state
        search = self._search_mem if state is BehaviorState.SearchBall else SearchMemory()
        self.memory = BehaviorMemory(state, game, search, target)
        return StepOutput(cmd, state, game, reason, changed)

    def _skill(self, belief: BeliefSnapshot, game: GameState, clearout: bool, dive: Optional[int]):
        f, cfg, mem = self.field, self.config, self.memory
        pose = belief.believed_pose
        self._search_mem = mem.search
        if game is GameState.Stopped:
            return STOP, BehaviorState.Idle, "stopped", None
        if game is GameState.Positioning:
            target = belief.positioning_target
            if target is None:
                return STOP, BehaviorState.Idle, "no kickoff slot", None
            return follow_path(pose, target, self._robot_obstacles(belief), cfg), BehaviorState.GoToPose, "kickoff positioning", target
        if game is GameState.KeepGoalPosture:
            cmd, state, reason = goalkeeper_step(belief, f, clearout, dive, cfg, mem.state)
            return cmd, state, reason, None
        if game is GameState.DefaultBallHandling:
            if belief.ball_est is None:
                return self._search(belief)
            if mem.state not in _BALL_CONTACT:
                # always pass through an approach before touching the ball
                cmd, _, _ = _ball_handling(belief, BehaviorState.Idle, f, cfg)
                return cmd, BehaviorState.GoToBall, "ball found", None
            cmd, state, reason = _ball_handling(belief, mem.state, f, cfg)
            return cmd, state, reason, None
        if game is GameState.DefendPosture:
            striker = self._striker_pose(belief)
            if belief.ball_est is None and striker is None:
                return self._search(belief)
            target = defender_target_pose(belief.ball_est, striker, f, self.defender)
            target = Pose2D(*keep_out_of_goal_area(target.position, f, f.region1_tolerance), target.theta)
            obstacles = self._robot_obstacles(belief)
            if belief.ball_est is not None:
                obstacles.append((belief.ball_est, cfg.ball_avoid_radius))
            return follow_path(pose, target, obstacles, cfg), BehaviorState.GoToPose, "defend on goal-ball line", target
        if game is GameState.WaitClearOutPosture:
            ball = belief.ball_est
            if ball is None:
                return STOP, BehaviorState.Idle, "waiting, ball unknown", None
            clearer = self._goalkeeper_pose(belief) or goalkeeper_hold_target(ball, f, cfg)
            result = self._wait_target(belief, ball, clearer)
            face = heading_to(result.pose.position, ball) if dist(result.pose.position, ball) > 1e-9 else pose.theta
            target = Pose2D(result.pose.x, result.pose.y, face)
            return follow_path(pose, target, self._robot_obstacles(belief), cfg), BehaviorState.GoToPose, "wait for clear-out", target
        return STOP, BehaviorState.Idle, "no posture", None

    def _wait_target(self, belief: BeliefSnapshot, ball: Point, clearer: Pose2D):
        """Own staging point; lower-id waiters pick first and are kept clear of."""
        waiters = sorted(
            (m for m in belief.inbox if m.role is Role.FieldPlayer and m.active and m.task is Task.WaitClearOut and m.sender_id < self.id),
            key=lambda m: m.sender_id,
        )
        taken: List[Pose2D] = []
        for m in waiters:
            taken.append(wait_clearout_target(m.robot_pose, ball, clearer, taken, self.field, self.waiting).pose)
        return wait_clearout_target(belief.believed_pose, ball, clearer, taken, self.field, self.waiting)

    def _search(self, belief: BeliefSnapshot):
        prev = self.memory.search if self.memory.state is BehaviorState.SearchBall else SearchMemory()
        cmd, self._search_mem = search_ball_step(belief, prev, self.field, self.config)
        return cmd, BehaviorState.SearchBall, f"search {self._search_mem.phase.value}", None

    def _robot_obstacles(self, belief: BeliefSnapshot) -> List[Tuple[Point, float]]:
        return [(o, self.config.teammate_clearance) for o in belief.obstacles]

    def _striker_pose(self, belief: BeliefSnapshot) -> Optional[Pose2D]:
        strikers = [m for m in belief.inbox if m.task is Task.Attack and m.active and m.sender_id != self.id]
        return min(strikers, key=lambda m: m.sender_id).robot_pose if strikers else None

    def _goalkeeper_pose(self, belief: BeliefSnapshot) -> Optional[Pose2D]:
        keepers = [m for m in belief.inbox if m.role is Role.Goalkeeper and m.active]
        return keepers[0].robot_pose if keepers else None
