"""Field model, region classification and target-pose computations.

All functions here are pure. Coordinates are in a team's field frame: origin
at the center spot, +x toward the opponent goal, +y to the left, headings in
radians normalized into (-pi, pi].
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

Point = Tuple[float, float]

TWO_PI = 2.0 * math.pi
EPS = 1e-9


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite pose position ({self.x}, {self.y})")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def position(self) -> Point:
        return (self.x, self.y)

    def compose(self, dx: float, dy: float, dtheta: float) -> "Pose2D":
        """Apply a body-frame displacement."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(self.x + c * dx - s * dy, self.y + s * dx + c * dy, self.theta + dtheta)

    def to_local(self, p: Point) -> Point:
        """Express a field-frame point in this pose's body frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = p[0] - self.x, p[1] - self.y
        return (c * dx + s * dy, -s * dx + c * dy)

    def to_field(self, p: Point) -> Point:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return (self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1])

    def mirrored(self) -> "Pose2D":
        """Reflect across the x-axis."""
        return Pose2D(self.x, -self.y, -self.theta)

    def rotated_half_turn(self) -> "Pose2D":
        """Point reflection through the origin; maps one team's frame to the other's."""
        return Pose2D(-self.x, -self.y, self.theta + math.pi)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.theta]


def dist(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def heading_to(a: Point, b: Point) -> float:
    return math.atan2(b[1] - a[1], b[0] - a[0])


def unit(v: Point) -> Optional[Point]:
    n = math.hypot(v[0], v[1])
    if n < EPS:
        return None
    return (v[0] / n, v[1] / n)


def clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    return dist(p, closest_point_on_segment(p, a, b))


def closest_point_on_segment(p: Point, a: Point, b: Point) -> Point:
    ax, ay = a
    vx, vy = b[0] - ax, b[1] - ay
    vv = vx * vx + vy * vy
    if vv < EPS * EPS:
        return a
    t = clamp(((p[0] - ax) * vx + (p[1] - ay) * vy) / vv, 0.0, 1.0)
    return (ax + t * vx, ay + t * vy)


def point_ray_distance(p: Point, origin: Point, direction: Point) -> float:
    """Distance from ``p`` to the ray starting at ``origin`` along unit ``direction``."""
    t = (p[0] - origin[0]) * direction[0] + (p[1] - origin[1]) * direction[1]
    if t <= 0.0:
        return dist(p, origin)
    return abs((p[0] - origin[0]) * direction[1] - (p[1] - origin[1]) * direction[0])


@dataclass(frozen=True)
class FieldModel:
    length: float = 9.0
    width: float = 6.0
    goal_area_depth: float = 1.0
    goal_area_width: float = 3.0
    goal_width: float = 1.8
    penalty_mark_distance: float = 2.1
    center_circle_radius: float = 0.75
    region1_tolerance: float = 0.3
    region2_limit_x: float = -1.5
    presence_line_x: float = -2.0

    def __post_init__(self) -> None:
        if not (self.length > self.width > 0):
            raise ValueError("field requires length > width > 0")
        if not self.goal_area_depth < self.length / 2:
            raise ValueError("goal_area_depth must be < length/2")
        if not self.region2_limit_x > -self.length / 2 + self.goal_area_depth:
            raise ValueError("region2_limit_x must lie beyond the goal area")
        if not self.presence_line_x > -self.length / 2:
            raise ValueError("presence_line_x must lie inside the field")

    @property
    def half_length(self) -> float:
        return self.length / 2

    @property
    def half_width(self) -> float:
        return self.width / 2

    @property
    def own_goal_center(self) -> Point:
        return (-self.half_length, 0.0)

    @property
    def opponent_goal_center(self) -> Point:
        return (self.half_length, 0.0)

    @property
    def penalty_marks(self) -> Tuple[Point, Point]:
        """(own, opponent) penalty marks."""
        x = self.half_length - self.penalty_mark_distance
        return ((-x, 0.0), (x, 0.0))

    def goal_area_box(self, expand: float = 0.0) -> Tuple[float, float, float]:
        """Own goal area as (x_min, x_max, half_width), optionally grown outward.

        The box is grown into the field and sideways; it is not grown behind
        the goal line.
        """
        return (
            -self.half_length,
            -self.half_length + self.goal_area_depth + expand,
            self.goal_area_width / 2 + expand,
        )

    def in_own_goal_area(self, p: Point, expand: float = 0.0) -> bool:
        x0, x1, hw = self.goal_area_box(expand)
        return x0 <= p[0] <= x1 and abs(p[1]) <= hw

    def clamp_to_field(self, p: Point) -> Point:
        return (
            clamp(p[0], -self.half_length, self.half_length),
            clamp(p[1], -self.half_width, self.half_width),
        )

    def contains(self, p: Point, margin: float = 0.0) -> bool:
        return abs(p[0]) <= self.half_length + margin and abs(p[1]) <= self.half_width + margin


class Region(enum.IntEnum):
    Region1 = 1
    Region2 = 2
    Region3 = 3


@dataclass(frozen=True)
class DefenderParams:
    gain_k: float = 0.5
    magnitude_min: float = 1.4
    teammate_separation: float = 1.5

    def __post_init__(self) -> None:
        if not 0 < self.gain_k <= 1:
            raise ValueError("gain_k must lie in (0, 1]")
        if self.magnitude_min <= 0 or self.teammate_separation <= 0:
            raise ValueError("magnitude_min and teammate_separation must be positive")


def classify_ball_region(ball: Point, field: FieldModel) -> Region:
    """Goalkeeper clear-out region of a ball position (own goal at -x).

    Ties on a boundary resolve toward the lower-numbered region.
    """
    p = field.clamp_to_field(ball)
    if field.in_own_goal_area(p, field.region1_tolerance):
        return Region.Region1
    if p[0] <= field.region2_limit_x:
        return Region.Region2
    return Region.Region3


def presence_line_clear(teammate_positions: Iterable[Point], field: FieldModel) -> bool:
    """True iff no field player stands between the own goal and the presence line."""
    return all(p[0] >= field.presence_line_x for p in teammate_positions)


def defender_target_pose(
    ball_est: Optional[Point],
    striker_pose: Optional[Pose2D],
    field: FieldModel,
    params: DefenderParams = DefenderParams(),
) -> Pose2D:
    """Defender pose on the goal-to-ball vector.

    The distance from the own goal center is ``gain_k * d`` saturated to
    ``[magnitude_min, max(magnitude_min, d - teammate_separation)]``, where
    ``d`` is the distance from the goal center to the anchor (the ball, or the
    striker when the ball is unknown). The robot faces the anchor.
    """
    if ball_est is not None:
        anchor = ball_est
    elif striker_pose is not None:
        anchor = striker_pose.position
    else:
        raise ValueError("defender_target_pose needs a ball estimate or a striker pose")
    gx, gy = field.own_goal_center
    d = dist(anchor, (gx, gy))
    direction = unit((anchor[0] - gx, anchor[1] - gy))
    if direction is None:
        return Pose2D(gx + params.magnitude_min, gy, 0.0)
    hi = max(params.magnitude_min, d - params.teammate_separation)
    magnitude = clamp(params.gain_k * d, params.magnitude_min, hi)
    x = gx + magnitude * direction[0]
    y = gy + magnitude * direction[1]
    if dist((x, y), anchor) < EPS:
        theta = math.atan2(direction[1], direction[0])
    else:
        theta = heading_to((x, y), anchor)
    return Pose2D(x, y, theta)


# ---------------------------------------------------------------------------
# Obstacle-surrounding paths


@dataclass
class PathResult:
    points: List[Point]
    truncated: bool = False

    def length(self) -> float:
        return sum(dist(a, b) for a, b in zip(self.points, self.points[1:]))


ARC_STEP = math.radians(15.0)
_SURROUND_MARGIN = 1e-7


def _segment_hits_disc(a: Point, b: Point, c: Point, r: float) -> bool:
    return point_segment_distance(c, a, b) < r - 1e-12


def _tangent_angles(p: Point, c: Point, r: float) -> Tuple[float, float]:
    """Angles (about ``c``) of the two tangent points from external point ``p``."""
    d = dist(p, c)
    base = heading_to(c, p)
    alpha = math.acos(clamp(r / d, -1.0, 1.0))
    return base + alpha, base - alpha


def _arc_vertices(c: Point, r: float, a0: float, a1: float, ccw: bool) -> List[Point]:
    """Circumscribed polyline around the arc from angle a0 to a1.

    Vertices sit on radius r/cos(step/2) so every segment stays tangent to
    the circle or outside it.
    """
    sweep = normalize_angle(a1 - a0)
    if ccw and sweep < 0:
        sweep += TWO_PI
    elif not ccw and sweep > 0:
        sweep -= TWO_PI
    n = max(1, int(math.ceil(abs(sweep) / ARC_STEP - 1e-9)))
    step = sweep / n
    out_r = r / math.cos(step / 2)
    pts = [(c[0] + r * math.cos(a0), c[1] + r * math.sin(a0))]
    for i in range(n):
        mid = a0 + step * (i + 0.5)
        pts.append((c[0] + out_r * math.cos(mid), c[1] + out_r * math.sin(mid)))
    pts.append((c[0] + r * math.cos(a1), c[1] + r * math.sin(a1)))
    return pts


def _detour(a: Point, b: Point, c: Point, r: float, ccw: bool) -> List[Point]:
    """Interior vertices of a tangent detour from a to b around disc (c, r)."""
    ta = _tangent_angles(a, c, r)
    tb = _tangent_angles(b, c, r)
    # Going counter-clockwise around c leaves a on its "+" tangent and reaches b from its "-" tangent.
    if ccw:
        a0, a1 = ta[0], tb[1]
    else:
        a0, a1 = ta[1], tb[0]
    return _arc_vertices(c, r, a0, a1, ccw)


def _merge_discs(discs: List[Tuple[Point, float]]) -> List[Tuple[Point, float]]:
    """Replace overlapping discs by their enclosing disc until all are disjoint."""
    discs = list(discs)
    changed = True
    while changed:
        changed = False
        for i in range(len(discs)):
            for j in range(i + 1, len(discs)):
                (c1, r1), (c2, r2) = discs[i], discs[j]
                d = dist(c1, c2)
                if d < r1 + r2:
                    discs[i] = _enclosing_disc(c1, r1, c2, r2)
                    del discs[j]
                    changed = True
                    break
            if changed:
                break
    return discs


def _enclosing_disc(c1: Point, r1: float, c2: Point, r2: float) -> Tuple[Point, float]:
    d = dist(c1, c2)
    if d + r2 <= r1:
        return c1, r1
    if d + r1 <= r2:
        return c2, r2
    r = (d + r1 + r2) / 2
    t = (r - r1) / d
    return (c1[0] + (c2[0] - c1[0]) * t, c1[1] + (c2[1] - c1[1]) * t), r


def _route(a: Point, b: Point, discs: List[Tuple[Point, float]], depth: int) -> Optional[List[Point]]:
    """Collision-free polyline from a to b (both outside all discs), or None."""
    hits = [(dist(a, c), c, r) for c, r in discs if _segment_hits_disc(a, b, c, r)]
    if not hits:
        return [a, b]
    if depth > 2 * len(discs) + 2:
        return None
    hits.sort()
    _, c, r = hits[0]
    best: Optional[List[Point]] = None
    best_len = math.inf
    for ccw in (True, False):
        arc = _detour(a, b, c, r, ccw)
        if any(dist(v, oc) < orr - 1e-12 for v in arc for oc, orr in discs):
            continue
        route = [a]
        ok = True
        waypoints = [a] + arc + [b]
        for p, q in zip(waypoints, waypoints[1:]):
            sub = _route(p, q, discs, depth + 1)
            if sub is None:
                ok = False
                break
            route.extend(sub[1:])
        if not ok:
            continue
        length = sum(dist(p, q) for p, q in zip(route, route[1:]))
        if length < best_len - 1e-12:
            best, best_len = route, length
    return best


def _free_goal(start: Point, goal: Point, discs: List[Tuple[Point, float]]) -> Tuple[Point, bool]:
    end, truncated = goal, False
    for _ in range(len(discs) + 1):
        inside = [(c, r) for c, r in discs if dist(end, c) < r]
        if not inside:
            break
        c, r = inside[0]
        direction = unit((end[0] - c[0], end[1] - c[1])) or unit((start[0] - c[0], start[1] - c[1])) or (1.0, 0.0)
        end = (c[0] + direction[0] * (r + 1e-9), c[1] + direction[1] * (r + 1e-9))
        truncated = True
    return end, truncated


def surround_path(
    start: Point,
    goal: Point,
    obstacles: Sequence[Tuple[Point, float]],
    inflate: float = 0.0,
) -> PathResult:
    """Shortest-side tangent detour around every obstacle disc on the way.

    ``obstacles`` are ``(center, radius)`` pairs; each radius is grown by
    ``inflate`` (the robot radius). Discs that already contain ``start`` are
    ignored since no path can leave them cleanly. If ``goal`` lies inside a
    disc the path ends at the nearest free point on its boundary and the
    result is flagged ``truncated``.
    """
    if dist(start, goal) < EPS:
        raise ValueError("surround_path requires start != goal")
    discs = [
        (c, r + inflate + _SURROUND_MARGIN)
        for c, r in obstacles
        if dist(start, c) >= r + inflate
    ]
    end, truncated = _free_goal(start, goal, discs)
    if dist(start, end) < EPS:
        return PathResult([start, end], truncated)
    route = _route(start, end, discs, 0)
    if route is None:
        # Overlapping discs can leave no tangent detour; route around their union instead.
        merged = discs
        while route is None:
            before = len(merged)
            merged = _merge_discs(merged)
            if len(merged) == before and len(merged) > 1:
                (c1, r1), (c2, r2) = merged[0], merged[1]
                merged = [_enclosing_disc(c1, r1, c2, r2)] + merged[2:]
            merged = [d for d in merged if dist(start, d[0]) >= d[1]]
            end, cut = _free_goal(start, end, merged)
            truncated = truncated or cut
            route = _route(start, end, merged, 0)
            if route is None and len(merged) <= 1:
                route = [start, end]
    return PathResult(route, truncated)


# ---------------------------------------------------------------------------
# WaitClearOut staging


@dataclass(frozen=True)
class WaitClearOutParams:
    shot_corridor_halfwidth: float = 0.5
    min_robot_separation: float = 1.0
    margin: float = 1e-6


@dataclass
class TargetResult:
    pose: Pose2D
    feasible: bool = True


def _circle_line_intersections(c: Point, r: float, p: Point, d: Point) -> List[Point]:
    # line p + t d, |d| = 1
    fx, fy = p[0] - c[0], p[1] - c[1]
    b = fx * d[0] + fy * d[1]
    cc = fx * fx + fy * fy - r * r
    disc = b * b - cc
    if disc < 0:
        return []
    s = math.sqrt(disc)
    return [(p[0] + (-b + s) * d[0], p[1] + (-b + s) * d[1]), (p[0] + (-b - s) * d[0], p[1] + (-b - s) * d[1])]


def _circle_circle_intersections(c1: Point, r1: float, c2: Point, r2: float) -> List[Point]:
    d = dist(c1, c2)
    if d < EPS or d > r1 + r2 or d < abs(r1 - r2):
        return []
    a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
    h = math.sqrt(max(0.0, r1 * r1 - a * a))
    ux, uy = (c2[0] - c1[0]) / d, (c2[1] - c1[1]) / d
    mx, my = c1[0] + a * ux, c1[1] + a * uy
    return [(mx - h * uy, my + h * ux), (mx + h * uy, my - h * ux)]


def _line_line_intersection(p1: Point, d1: Point, p2: Point, d2: Point) -> Optional[Point]:
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < EPS:
        return None
    t = ((p2[0] - p1[0]) * d2[1] - (p2[1] - p1[1]) * d2[0]) / den
    return (p1[0] + t * d1[0], p1[1] + t * d1[1])


def wait_clearout_feasible(
    p: Point,
    ball: Point,
    teammates: Sequence[Point],
    field: FieldModel,
    params: WaitClearOutParams = WaitClearOutParams(),
    slack: float = 0.0,
) -> bool:
    """Constraint predicate shared by the solver and the tests."""
    if not field.contains(p, 1e-9):
        return False
    if field.in_own_goal_area(p, field.region1_tolerance + slack):
        return False
    direction = unit((field.half_length - ball[0], -ball[1])) or (1.0, 0.0)
    if point_ray_distance(p, ball, direction) < params.shot_corridor_halfwidth + slack:
        return False
    return all(dist(p, t) >= params.min_robot_separation + slack for t in teammates)


def wait_clearout_target(
    self_pose: Pose2D,
    ball: Point,
    clearer: Pose2D,
    teammates: Sequence[Pose2D],
    field: FieldModel,
    params: WaitClearOutParams = WaitClearOutParams(),
) -> TargetResult:
    """Closest staging point to the ball that keeps the clear-out legal.

    The point stays outside the own goal area grown by the region-1
    tolerance, outside the shot corridor from the ball toward the opponent
    goal center, and at least ``min_robot_separation`` from the clearer and
    every teammate target. The optimum of a distance objective over this
    region lies on a constraint boundary (or at a pairwise intersection), so
    candidates are enumerated analytically and filtered. Exact ties prefer
    the candidate nearer to the robot itself.
    """
    others = [clearer.position] + [t.position for t in teammates]
    m = params.margin
    x0, x1, hw = field.goal_area_box(field.region1_tolerance)
    hw_f, hl_f = field.half_width, field.half_length
    direction = unit((field.half_length - ball[0], -ball[1])) or (1.0, 0.0)
    normal = (-direction[1], direction[0])
    h = params.shot_corridor_halfwidth + m

    # Boundary pieces as lines (point, unit dir) and circles (center, radius).
    lines: List[Tuple[Point, Point]] = [
        ((x1 + m, 0.0), (0.0, 1.0)),
        ((0.0, hw + m), (1.0, 0.0)),
        ((0.0, -hw - m), (1.0, 0.0)),
        ((-hl_f, 0.0), (0.0, 1.0)),
        ((hl_f, 0.0), (0.0, 1.0)),
        ((0.0, hw_f), (1.0, 0.0)),
        ((0.0, -hw_f), (1.0, 0.0)),
        ((ball[0] + normal[0] * h, ball[1] + normal[1] * h), direction),
        ((ball[0] - normal[0] * h, ball[1] - normal[1] * h), direction),
    ]
    circles: List[Tuple[Point, float]] = [(ball, h)]
    circles += [(o, params.min_robot_separation + m) for o in others]

    candidates: List[Point] = [ball]
    for p, d in lines:
        t = (ball[0] - p[0]) * d[0] + (ball[1] - p[1]) * d[1]
        candidates.append((p[0] + t * d[0], p[1] + t * d[1]))
    for c, r in circles:
        u = unit((ball[0] - c[0], ball[1] - c[1]))
        if u is not None:
            candidates.append((c[0] + r * u[0], c[1] + r * u[1]))
            candidates.append((c[0] - r * u[0], c[1] - r * u[1]))
    for i, (p1, d1) in enumerate(lines):
        for p2, d2 in lines[i + 1:]:
            q = _line_line_intersection(p1, d1, p2, d2)
            if q is not None:
                candidates.append(q)
        for c, r in circles:
            candidates.extend(_circle_line_intersections(c, r, p1, d1))
    for i, (c1, r1) in enumerate(circles):
        for c2, r2 in circles[i + 1:]:
            candidates.extend(_circle_circle_intersections(c1, r1, c2, r2))

    best: Optional[Point] = None
    best_key: Tuple[float, float] = (math.inf, math.inf)
    for q in candidates:
        if not wait_clearout_feasible(q, ball, others, field, params):
            continue
        key = (dist(q, ball), dist(q, self_pose.position))
        if key[0] < best_key[0] - 1e-9 or (abs(key[0] - best_key[0]) <= 1e-9 and key[1] < best_key[1]):
            best, best_key = q, key
    if best is None:
        return TargetResult(self_pose, feasible=False)
    return TargetResult(Pose2D(best[0], best[1], heading_to(best, ball)), feasible=True)


def keep_out_of_goal_area(p: Point, field: FieldModel, expand: float) -> Point:
    """Push a point out of the (expanded) own goal area along the shortest exit."""
    if not field.in_own_goal_area(p, expand):
        return p
    _, x1, hw = field.goal_area_box(expand)
    exits = [(x1 - p[0], (x1 + 1e-6, p[1])), (hw - p[1], (p[0], hw + 1e-6)), (p[1] + hw, (p[0], -hw - 1e-6))]
    exits.sort(key=lambda e: e[0])
    return exits[0][1]


def mirror_point(p: Point) -> Point:
    return (p[0], -p[1])
