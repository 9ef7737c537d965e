"""Trace invariant checker.

The same streaming :class:`Checker` runs online inside the runner (its
findings become Violation records) and offline over a trace file, so
``check`` on a run's own output reports exactly what the run reported.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from .geometry import FieldModel, classify_ball_region
from .teamplay import clearout_decision

TIME_EPS = 1e-6

# Rules whose findings make ``run`` exit non-zero.
SAFETY_RULES = (
    "StrikerUniqueness",
    "GoalkeeperConstancy",
    "Staleness",
    "RegionConsistency",
    "IllegalDefense",
    "IllegalDefenseTiming",
    "RequestInitiation",
)


@dataclass(frozen=True)
class Finding:
    rule: str
    time: float
    detail: str
    team: Optional[str] = None
    robot: Optional[int] = None

    def as_record(self) -> dict:
        d = {"rule": self.rule, "detail": self.detail}
        if self.team is not None:
            d["team"] = self.team
        if self.robot is not None:
            d["robot"] = self.robot
        return d

    @classmethod
    def from_record(cls, rec: dict) -> "Finding":
        return cls(rec["rule"], rec["time"], rec["detail"], rec.get("team"), rec.get("robot"))


class Checker:
    def __init__(self, header: dict):
        self.header = header
        self.field = FieldModel(**header["field"])
        self.dt = header["dt"]
        self.limit = header["illegal_defense_limit"]
        self.staleness = header["staleness"]
        self.refereed = set(header["refereed_teams"])
        self.phase = header["phase"]
        self.team_of: Dict[int, str] = {}
        self.role_of: Dict[int, str] = {}
        self.task: Dict[int, str] = {}
        for r in header["roster"]:
            self.team_of[r["id"]] = r["team"]
            self.role_of[r["id"]] = r["role"]
            self.task[r["id"]] = r["task"]
        self.occupancy: Dict[str, int] = {t: 0 for t in header["teams"]}
        self.onset: Dict[str, Optional[float]] = {t: None for t in header["teams"]}
        self.missed_reported: Dict[str, bool] = {t: False for t in header["teams"]}
        self.double_striker: Dict[str, bool] = {t: False for t in header["teams"]}

    # -- helpers ----------------------------------------------------------------

    def _strikers(self, team: str) -> List[int]:
        return sorted(r for r, t in self.task.items() if t == "Attack" and self.team_of[r] == team)

    def _occupancy_change(self, team: str, count: int, now: float) -> None:
        self.occupancy[team] = count
        if count < 2:
            self.onset[team] = None
            self.missed_reported[team] = False
        elif self.onset[team] is None and self.phase == "Playing" and team in self.refereed:
            self.onset[team] = now

    def _deadline(self, now: float) -> List[Finding]:
        out = []
        for team, onset in self.onset.items():
            if onset is None or self.missed_reported[team]:
                continue
            if now > onset + self.limit + self.dt + TIME_EPS:
                self.missed_reported[team] = True
                out.append(Finding("IllegalDefenseTiming", now, f"double occupancy since {onset:.2f} without a call", team))
        return out

    # -- records ---------------------------------------------------------------

    def feed(self, rec: dict) -> List[Finding]:
        kind = rec["kind"]
        now = rec["time"]
        out = self._deadline(now)
        if kind == "TaskChange":
            out.extend(self._task_change(rec, now))
        elif kind == "Tick":
            out.extend(self._tick(rec, now))
        elif kind == "Message":
            neg = rec.get("negotiation")
            if neg and neg["kind"] == "Request" and self.task.get(rec["sender"]) != "Defend":
                out.append(Finding(
                    "RequestInitiation", now, f"robot {rec['sender']} requested while {self.task.get(rec['sender'])}",
                    rec.get("team"), rec["sender"],
                ))
        elif kind == "Event":
            out.extend(self._event(rec, now))
        return out

    def _task_change(self, rec: dict, now: float) -> List[Finding]:
        out = []
        rid = rec["robot"]
        team = self.team_of[rid]
        if self.task.get(rid) != rec["prior"]:
            out.append(Finding("TaskChangeConsistency", now, f"prior {rec['prior']} but tracked {self.task.get(rid)}", team, rid))
        self.task[rid] = rec["new"]
        if self.role_of[rid] == "Goalkeeper":
            out.append(Finding("GoalkeeperConstancy", now, f"goalkeeper changed {rec['prior']} -> {rec['new']}", team, rid))
        strikers = self._strikers(team)
        if len(strikers) > 1 and not self.double_striker[team]:
            out.append(Finding("StrikerUniqueness", now, f"robots {strikers} all Attack", team))
        self.double_striker[team] = len(strikers) > 1
        return out

    def _tick(self, rec: dict, now: float) -> List[Finding]:
        out = []
        for r in rec["robots"]:
            rid = r["id"]
            if r["task"] != self.task.get(rid):
                out.append(Finding("TaskChangeConsistency", now, f"tick shows {r['task']} but tracked {self.task.get(rid)}", r["team"], rid))
            if self.role_of[rid] == "Goalkeeper" and r["task"] != "KeepGoal":
                out.append(Finding("GoalkeeperConstancy", now, f"goalkeeper reports {r['task']}", r["team"], rid))
            for sender, send_time in r.get("inbox", []):
                if now - send_time > self.staleness + TIME_EPS:
                    out.append(Finding("Staleness", now, f"message from {sender} sent {send_time:.3f} is {now - send_time:.3f} s old", r["team"], rid))
        for g in rec.get("goalies", []):
            ball = g["ball"]
            region = classify_ball_region(tuple(ball), self.field).name if ball is not None else None
            decision = clearout_decision(tuple(ball) if ball is not None else None, [tuple(p) for p in g["presence"]], self.field).value
            if region != g["region"] or decision != g["decision"]:
                out.append(Finding(
                    "RegionConsistency", now,
                    f"logged {g['region']}/{g['decision']} but ball {ball} gives {region}/{decision}", g["team"], g["id"],
                ))
            elif g["announcing"] and decision != "ClearOut":
                out.append(Finding("RegionConsistency", now, f"clear-out announced with decision {decision}", g["team"], g["id"]))
        return out

    def _event(self, rec: dict, now: float) -> List[Finding]:
        out = []
        ev = rec["event"]
        if ev == "AreaOccupancy":
            self._occupancy_change(rec["team"], rec["count"], now)
        elif ev == "PhaseChange":
            self.phase = rec["phase"]
            for team in self.onset:
                if self.phase != "Playing":
                    self.onset[team] = None
                    self.missed_reported[team] = False
                elif self.occupancy[team] >= 2 and team in self.refereed and self.onset[team] is None:
                    # the referee starts counting on the following tick
                    self.onset[team] = now + self.dt
        elif ev == "IllegalDefense":
            team = rec["team"]
            out.append(Finding("IllegalDefense", now, f"double occupancy held {rec['held']:.2f} s", team))
            onset = self.onset[team]
            if onset is None or abs(now - onset - self.limit) > self.dt + TIME_EPS:
                out.append(Finding("IllegalDefenseTiming", now, f"called at {now:.2f} with tracked onset {onset}", team))
            self.onset[team] = None
            self.missed_reported[team] = False
        return out

    def finish(self, now: float) -> List[Finding]:
        return self._deadline(now)


@dataclass
class CheckReport:
    findings: List[Finding]
    logged: List[Finding]

    @property
    def safety(self) -> List[Finding]:
        return [f for f in self.findings if f.rule in SAFETY_RULES]

    @property
    def consistent_with_run(self) -> bool:
        key = lambda f: (f.rule, round(f.time, 6), f.team, f.robot, f.detail)
        return sorted(map(key, self.findings)) == sorted(map(key, self.logged))


def check_records(records: Iterable[dict]) -> CheckReport:
    records = iter(records)
    header = next(records)
    checker = Checker(header)
    findings: List[Finding] = []
    logged: List[Finding] = []
    last = 0.0
    for rec in records:
        last = rec["time"]
        if rec["kind"] == "Violation":
            logged.append(Finding.from_record(rec))
            continue
        if rec["kind"] == "End":
            findings.extend(checker.finish(last))
            continue
        findings.extend(checker.feed(rec))
    return CheckReport(findings, logged)


def check_trace(path: str) -> CheckReport:
    from .trace import read_trace

    return check_records(read_trace(path).records)
