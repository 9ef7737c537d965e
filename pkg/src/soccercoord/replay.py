"""Rebuild and render the field state at a time from a trace."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .geometry import FieldModel, classify_ball_region
from .simkernel import to_team_frame
from .trace import Trace

TIME_EPS = 1e-6


class OutOfRange(ValueError):
    """Queried time lies outside the trace span."""


@dataclass
class RobotState:
    id: int
    team: str
    role: str
    pose: List[float]  # world frame
    task: str
    state: Optional[str]
    active: bool
    fallen: bool


@dataclass
class Snapshot:
    time: float
    tick_time: float
    phase: str
    ball: List[float]
    score: Dict[str, int]
    robots: List[RobotState]
    regions: Dict[str, str] = field(default_factory=dict)  # team -> ball region in that team's frame


def snapshot_at(trace: Trace, at: float) -> Snapshot:
    start, end = 0.0, trace.end_time
    if not (start - TIME_EPS <= at <= end + TIME_EPS):
        raise OutOfRange(f"time {at} outside trace span [{start}, {end}]")
    tick = None
    changes: List[dict] = []
    for rec in trace.records:
        if rec["time"] > at + TIME_EPS:
            break
        if rec["kind"] == "Tick":
            tick = rec
            changes = []
        elif rec["kind"] == "TaskChange":
            changes.append(rec)
    if tick is None:
        raise OutOfRange(f"no tick recorded at or before {at}")
    tasks = {r["id"]: r["task"] for r in tick["robots"]}
    for ch in changes:
        # task changes between control ticks (negotiation, egress) apply immediately
        tasks[ch["robot"]] = ch["new"]
    robots = [
        RobotState(r["id"], r["team"], r["role"], r["pose"], tasks[r["id"]], r["state"], r["active"], r["fallen"])
        for r in tick["robots"]
    ]
    f = FieldModel(**trace.header["field"])
    teams = sorted({r.team for r in robots})
    regions = {t: classify_ball_region(to_team_frame(t, tuple(tick["ball"])), f).name for t in teams}
    return Snapshot(at, tick["time"], tick["phase"], tick["ball"], tick["score"], robots, regions)


def render_text(snap: Snapshot) -> str:
    lines = [
        f"t={snap.time:.2f}s (tick {snap.tick_time:.2f})  phase={snap.phase}  "
        f"score blue {snap.score.get('blue', 0)} : {snap.score.get('red', 0)} red",
        f"ball  ({snap.ball[0]:+.2f}, {snap.ball[1]:+.2f})  " + "  ".join(f"{t}:{r}" for t, r in snap.regions.items()),
    ]
    for r in snap.robots:
        flags = []
        if not r.active:
            flags.append("penalized")
        if r.fallen:
            flags.append("fallen")
        lines.append(
            f"  {r.team:<4} #{r.id} {r.role:<11} ({r.pose[0]:+.2f}, {r.pose[1]:+.2f}, {math.degrees(r.pose[2]):+6.1f} deg)"
            f"  {r.task:<12} {r.state or '-'}" + (f"  [{', '.join(flags)}]" if flags else "")
        )
    return "\n".join(lines)


def export_diagram(snap: Snapshot, f: FieldModel, path: str) -> None:
    """Static field diagram of one snapshot (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle, Rectangle

    fig, ax = plt.subplots(figsize=(9, 6.5))
    hl, hw = f.half_length, f.half_width
    ax.add_patch(Rectangle((-hl, -hw), f.length, f.width, fill=False, lw=1.5))
    ax.plot([0, 0], [-hw, hw], "k-", lw=1)
    ax.add_patch(Circle((0, 0), f.center_circle_radius, fill=False))
    for side in (-1, 1):
        x0 = -hl if side < 0 else hl - f.goal_area_depth
        ax.add_patch(Rectangle((x0, -f.goal_area_width / 2), f.goal_area_depth, f.goal_area_width, fill=False, ls="--"))
        ax.plot([side * hl] * 2, [-f.goal_width / 2, f.goal_width / 2], lw=5, color="0.4")
    ax.axvline(f.region2_limit_x, color="orange", ls=":", lw=1)
    colors = {"blue": "tab:blue", "red": "tab:red"}
    for r in snap.robots:
        x, y, th = r.pose
        ax.add_patch(Circle((x, y), 0.2, color=colors.get(r.team, "k"), alpha=0.5 if r.active else 0.15))
        ax.arrow(x, y, 0.3 * math.cos(th), 0.3 * math.sin(th), head_width=0.08, color="k")
        ax.annotate(f"{r.id}:{r.task}", (x, y + 0.25), ha="center", fontsize=8)
    ax.add_patch(Circle(tuple(snap.ball), 0.07, color="orange"))
    ax.set_xlim(-hl - 0.8, hl + 0.8)
    ax.set_ylim(-hw - 0.8, hw + 0.8)
    ax.set_aspect("equal")
    ax.set_title(f"t = {snap.time:.2f} s  {snap.phase}")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
