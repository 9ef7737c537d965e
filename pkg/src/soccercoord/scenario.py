"""Scenario files: YAML with explicit seed and rosters, validated with line numbers.

Defaults for everything except ``seed`` and ``teams`` live in DEFAULTS and
are documented in the README.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .geometry import FieldModel, Point, Pose2D
from .simkernel import TEAMS, GCPhase
from .tasks import Role

MAX_ROBOTS = 3
FAULT_KINDS = ("fall", "penalize", "place_ball", "link_loss")
LOCALIZATION_MODES = ("known", "hypotheses", "off")

DEFAULTS: Dict[str, Any] = {
    "duration": 60.0,
    "teamplay": True,
    "phase": "Playing",
    "kickoff": "blue",
    "ball": [0.0, 0.0],
    "localization": "known",
    "bus": {"loss": 0.0, "latency": 0.0, "jitter": 0.0, "period": 0.125, "staleness": 5.0},
    "noise": {
        "range_sigma": 0.0,
        "bearing_sigma": 0.0,
        "detection_probability": 1.0,
        "ball_sigma": 0.0,
        "ball_range": 6.0,
        "odometry_sigma": 0.0,
    },
    "field": {},
}


class ScenarioError(ValueError):
    """Parse or validation failure pointing at a line and field."""

    def __init__(self, message: str, field_path: str = "", line: Optional[int] = None):
        self.field_path = field_path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(field_path)
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


@dataclass(frozen=True)
class RobotSpec:
    id: int
    team: str
    role: Role
    pose: Optional[Pose2D] = None  # team frame; None means auto kickoff slot


@dataclass(frozen=True)
class Fault:
    at: float
    kind: str
    robot: Optional[int] = None
    duration: Optional[float] = None
    position: Optional[Point] = None  # world frame
    pin: bool = False
    team: Optional[str] = None
    sender: Optional[int] = None
    receivers: Tuple[int, ...] = ()
    loss: float = 1.0


@dataclass(frozen=True)
class BusSpec:
    loss: float = 0.0
    latency: float = 0.0
    jitter: float = 0.0
    period: float = 0.125
    staleness: float = 5.0


@dataclass(frozen=True)
class NoiseSpec:
    range_sigma: float = 0.0
    bearing_sigma: float = 0.0
    detection_probability: float = 1.0
    ball_sigma: float = 0.0
    ball_range: float = 6.0
    odometry_sigma: float = 0.0


@dataclass(frozen=True)
class Scenario:
    seed: int
    robots: Tuple[RobotSpec, ...]
    field: FieldModel = FieldModel()
    duration: float = 60.0
    teamplay: bool = True
    phase: GCPhase = GCPhase.Playing
    kickoff: str = "blue"
    ball: Point = (0.0, 0.0)
    localization: str = "known"
    bus: BusSpec = BusSpec()
    noise: NoiseSpec = NoiseSpec()
    faults: Tuple[Fault, ...] = ()
    name: str = ""

    def team(self, team: str) -> List[RobotSpec]:
        return sorted((r for r in self.robots if r.team == team), key=lambda r: r.id)

    def with_overrides(self, seed=None, duration=None, loss=None, teamplay=None) -> "Scenario":
        s = self
        if seed is not None:
            s = dataclasses.replace(s, seed=int(seed))
        if duration is not None:
            if not duration > 0:
                raise ScenarioError("must be positive", "duration")
            s = dataclasses.replace(s, duration=float(duration))
        if loss is not None:
            if not 0.0 <= loss <= 1.0:
                raise ScenarioError("must lie in [0, 1]", "bus.loss")
            s = dataclasses.replace(s, bus=dataclasses.replace(s.bus, loss=float(loss)))
        if teamplay is not None:
            s = dataclasses.replace(s, teamplay=bool(teamplay))
        return s


# ---------------------------------------------------------------------------
# YAML with per-field line numbers


def _to_python(node: yaml.Node, path: str, lines: Dict[str, int]):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            sub = f"{path}.{key}" if path else str(key)
            if key in out:
                raise ScenarioError("duplicate key", sub, k.start_mark.line + 1)
            out[key] = _to_python(v, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


class _Reader:
    def __init__(self, lines: Dict[str, int]):
        self.lines = lines

    def error(self, path: str, message: str) -> ScenarioError:
        line = self.lines.get(path)
        probe = path
        while line is None and probe:
            probe = probe.rsplit(".", 1)[0] if "." in probe else ""
            line = self.lines.get(probe)
        return ScenarioError(message, path, line)

    def number(self, value, path: str, lo: float = -math.inf, hi: float = math.inf, integer: bool = False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, f"expected a number, got {value!r}")
        if integer and not isinstance(value, int):
            raise self.error(path, f"expected an integer, got {value!r}")
        if not math.isfinite(value) or not lo <= value <= hi:
            raise self.error(path, f"value {value!r} outside [{lo}, {hi}]")
        return value

    def mapping(self, value, path: str, allowed) -> dict:
        if not isinstance(value, dict):
            raise self.error(path, "expected a mapping")
        for k in value:
            if k not in allowed:
                raise self.error(f"{path}.{k}" if path else str(k), "unknown key")
        return value

    def vector(self, value, path: str, n: int) -> Tuple[float, ...]:
        if not isinstance(value, list) or len(value) != n:
            raise self.error(path, f"expected a list of {n} numbers")
        return tuple(float(self.number(v, f"{path}[{i}]")) for i, v in enumerate(value))


TOP_KEYS = ("name", "seed", "teams", "duration", "teamplay", "phase", "kickoff", "ball", "localization", "bus", "noise", "field", "faults")


def parse_scenario(text: str) -> Scenario:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"YAML syntax: {getattr(exc, 'problem', exc)}", "", mark.line + 1 if mark else None) from None
    if root is None:
        raise ScenarioError("empty scenario")
    lines: Dict[str, int] = {}
    data = _to_python(root, "", lines)
    rd = _Reader(lines)
    rd.mapping(data, "", TOP_KEYS)
    for key in ("seed", "teams"):
        if key not in data:
            raise ScenarioError("required key missing", key, 1)

    seed = rd.number(data["seed"], "seed", 0, 2**63 - 1, integer=True)
    duration = float(rd.number(data.get("duration", DEFAULTS["duration"]), "duration", 0.0))
    if not duration > 0:
        raise rd.error("duration", "must be positive")
    teamplay = data.get("teamplay", DEFAULTS["teamplay"])
    if not isinstance(teamplay, bool):
        raise rd.error("teamplay", "expected true or false")
    phase_name = data.get("phase", DEFAULTS["phase"])
    if phase_name not in ("Ready", "Set", "Playing"):
        raise rd.error("phase", "expected Ready, Set or Playing")
    kickoff = data.get("kickoff", DEFAULTS["kickoff"])
    if kickoff not in TEAMS:
        raise rd.error("kickoff", f"expected one of {TEAMS}")
    localization = data.get("localization", DEFAULTS["localization"])
    if localization not in LOCALIZATION_MODES:
        raise rd.error("localization", f"expected one of {LOCALIZATION_MODES}")

    field_cfg = rd.mapping(data.get("field", {}), "field", [f.name for f in dataclasses.fields(FieldModel)])
    try:
        fm = FieldModel(**{k: float(rd.number(v, f"field.{k}")) for k, v in field_cfg.items()})
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise rd.error("field", str(exc)) from None
    ball = rd.vector(data.get("ball", DEFAULTS["ball"]), "ball", 2)
    if not fm.contains(ball, 1e-9):
        raise rd.error("ball", "ball must start on the field")

    bus_cfg = rd.mapping(data.get("bus", {}), "bus", DEFAULTS["bus"])
    bus = BusSpec(
        loss=float(rd.number(bus_cfg.get("loss", 0.0), "bus.loss", 0.0, 1.0)),
        latency=float(rd.number(bus_cfg.get("latency", 0.0), "bus.latency", 0.0)),
        jitter=float(rd.number(bus_cfg.get("jitter", 0.0), "bus.jitter", 0.0)),
        period=float(rd.number(bus_cfg.get("period", 0.125), "bus.period", 1e-3)),
        staleness=float(rd.number(bus_cfg.get("staleness", 5.0), "bus.staleness", 1e-3)),
    )
    noise_cfg = rd.mapping(data.get("noise", {}), "noise", DEFAULTS["noise"])
    noise = NoiseSpec(**{
        k: float(rd.number(noise_cfg.get(k, d), f"noise.{k}", 0.0, 1.0 if k == "detection_probability" else math.inf))
        for k, d in DEFAULTS["noise"].items()
    })

    robots = _parse_teams(rd, data["teams"], fm)
    faults = _parse_faults(rd, data.get("faults", []), robots)
    name = data.get("name", "")
    if not isinstance(name, str):
        raise rd.error("name", "expected a string")
    return Scenario(
        seed=int(seed), robots=tuple(robots), field=fm, duration=duration, teamplay=teamplay,
        phase=GCPhase(phase_name), kickoff=kickoff, ball=ball, localization=localization,
        bus=bus, noise=noise, faults=tuple(faults), name=name,
    )


def _parse_teams(rd: _Reader, teams, fm: FieldModel) -> List[RobotSpec]:
    rd.mapping(teams, "teams", TEAMS)
    if not teams:
        raise rd.error("teams", "at least one team is required")
    robots: List[RobotSpec] = []
    seen: Dict[int, str] = {}
    for team, roster in teams.items():
        path = f"teams.{team}"
        if roster is None:
            roster = []
        if not isinstance(roster, list):
            raise rd.error(path, "expected a list of robots")
        if len(roster) > MAX_ROBOTS:
            raise rd.error(path, f"roster has {len(roster)} robots, at most {MAX_ROBOTS} allowed")
        keepers = 0
        for i, entry in enumerate(roster):
            rp = f"{path}[{i}]"
            rd.mapping(entry, rp, ("id", "role", "pose"))
            if "id" not in entry or "role" not in entry:
                raise rd.error(rp, "robot needs id and role")
            rid = int(rd.number(entry["id"], f"{rp}.id", 1, 10**6, integer=True))
            if rid in seen:
                raise rd.error(f"{rp}.id", f"robot id {rid} already used")
            seen[rid] = team
            if entry["role"] not in (r.value for r in Role):
                raise rd.error(f"{rp}.role", "expected Goalkeeper or FieldPlayer")
            role = Role(entry["role"])
            keepers += role is Role.Goalkeeper
            if keepers > 1:
                raise rd.error(f"{rp}.role", "at most one goalkeeper per team")
            pose = None
            if "pose" in entry:
                x, y, th = rd.vector(entry["pose"], f"{rp}.pose", 3)
                if not fm.contains((x, y), 1.0):
                    raise rd.error(f"{rp}.pose", "pose lies too far outside the field")
                pose = Pose2D(x, y, th)
            robots.append(RobotSpec(rid, team, role, pose))
    if not robots:
        raise rd.error("teams", "no robots")
    return robots


def _parse_faults(rd: _Reader, faults, robots: List[RobotSpec]) -> List[Fault]:
    if not isinstance(faults, list):
        raise rd.error("faults", "expected a list")
    ids = {r.id: r for r in robots}
    out: List[Fault] = []
    for i, entry in enumerate(faults):
        fp = f"faults[{i}]"
        rd.mapping(entry, fp, ("at", "kind", "robot", "duration", "position", "pin", "team", "from", "to", "loss"))
        kind = entry.get("kind")
        if kind not in FAULT_KINDS:
            raise rd.error(f"{fp}.kind", f"expected one of {FAULT_KINDS}")
        at = float(rd.number(entry.get("at", None), f"{fp}.at", 0.0))

        def robot_id(key: str) -> int:
            if key not in entry:
                raise rd.error(f"{fp}.{key}", "required for this fault")
            rid = rd.number(entry[key], f"{fp}.{key}", integer=True)
            if rid not in ids:
                raise rd.error(f"{fp}.{key}", f"unknown robot {rid}")
            return rid

        if kind in ("fall", "penalize"):
            duration = float(rd.number(entry.get("duration", 4.0 if kind == "fall" else 30.0), f"{fp}.duration", 0.0))
            if not duration > 0:
                raise rd.error(f"{fp}.duration", "must be positive")
            out.append(Fault(at, kind, robot=robot_id("robot"), duration=duration))
        elif kind == "place_ball":
            if "position" not in entry:
                raise rd.error(f"{fp}.position", "required for this fault")
            pos = rd.vector(entry["position"], f"{fp}.position", 2)
            pin = entry.get("pin", False)
            if not isinstance(pin, bool):
                raise rd.error(f"{fp}.pin", "expected true or false")
            duration = entry.get("duration")
            if duration is not None:
                duration = float(rd.number(duration, f"{fp}.duration", 0.0))
            out.append(Fault(at, kind, position=pos, pin=pin, duration=duration))
        else:
            sender = robot_id("from")
            team = ids[sender].team
            receivers = entry.get("to", None)
            if receivers is None:
                recv = tuple(r.id for r in robots if r.team == team and r.id != sender)
            else:
                if not isinstance(receivers, list):
                    raise rd.error(f"{fp}.to", "expected a list of robot ids")
                recv = []
                for j, rid in enumerate(receivers):
                    rd.number(rid, f"{fp}.to[{j}]", integer=True)
                    if rid not in ids or ids[rid].team != team or rid == sender:
                        raise rd.error(f"{fp}.to[{j}]", f"robot {rid} is not a teammate of {sender}")
                    recv.append(rid)
                recv = tuple(recv)
            loss = float(rd.number(entry.get("loss", 1.0), f"{fp}.loss", 0.0, 1.0))
            duration = entry.get("duration")
            if duration is not None:
                duration = float(rd.number(duration, f"{fp}.duration", 0.0))
            out.append(Fault(at, kind, duration=duration, team=team, sender=sender, receivers=recv, loss=loss))
    return sorted(out, key=lambda f: f.at)


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        scenario = parse_scenario(fh.read())
    if not scenario.name:
        scenario = dataclasses.replace(scenario, name=path.rsplit("/", 1)[-1])
    return scenario
