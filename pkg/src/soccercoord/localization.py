"""Multi-hypothesis pose estimation from landmark observations and odometry.

A bank starts with one hypothesis per legal placement. Each tick the bank is
propagated with gyro/odometry deltas, reweighted by a Gaussian range/bearing
likelihood of the observed landmarks (associated per hypothesis), nudged
toward the pose that best explains the observations, and finally pruned once
one hypothesis dominates for long enough.
"""
from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .geometry import FieldModel, Point, Pose2D, closest_point_on_segment, dist, normalize_angle


class LandmarkKind(str, enum.Enum):
    LineSegment = "LineSegment"
    GoalPost = "GoalPost"
    TJunction = "TJunction"
    CenterCircle = "CenterCircle"


@dataclass(frozen=True)
class Landmark:
    kind: LandmarkKind
    index: int
    a: Point
    b: Optional[Point] = None  # second endpoint for line segments

    def nearest_point(self, p: Point) -> Point:
        if self.b is None:
            return self.a
        return closest_point_on_segment(p, self.a, self.b)


class LandmarkMap:
    """Field landmarks grouped by kind; indices are stable within a kind."""

    def __init__(self, landmarks: Sequence[Landmark], margin: float = 1.0):
        self.landmarks = list(landmarks)
        xs = [c for lm in self.landmarks for c in (lm.a[0], (lm.b or lm.a)[0])]
        ys = [c for lm in self.landmarks for c in (lm.a[1], (lm.b or lm.a)[1])]
        # Hypotheses are kept within the map extent grown by ``margin``.
        self.bounds = (min(xs) - margin, max(xs) + margin, min(ys) - margin, max(ys) + margin)
        self.by_kind: Dict[LandmarkKind, List[Landmark]] = {k: [] for k in LandmarkKind}
        for lm in self.landmarks:
            self.by_kind[lm.kind].append(lm)

    @classmethod
    def from_field(cls, f: FieldModel, offset: Point = (0.0, 0.0)) -> "LandmarkMap":
        hl, hw = f.half_length, f.half_width
        gd, gw = f.goal_area_depth, f.goal_area_width / 2
        post = f.goal_width / 2
        ox, oy = offset

        def P(x: float, y: float) -> Point:
            return (x + ox, y + oy)

        posts = [P(-hl, post), P(-hl, -post), P(hl, post), P(hl, -post)]
        tjs = [P(-hl, gw), P(-hl, -gw), P(hl, gw), P(hl, -gw), P(0.0, hw), P(0.0, -hw)]
        lines = [
            (P(-hl, hw), P(hl, hw)),
            (P(-hl, -hw), P(hl, -hw)),
            (P(-hl, -hw), P(-hl, hw)),
            (P(hl, -hw), P(hl, hw)),
            (P(0.0, -hw), P(0.0, hw)),
            (P(-hl + gd, -gw), P(-hl + gd, gw)),
            (P(hl - gd, -gw), P(hl - gd, gw)),
            (P(-hl, gw), P(-hl + gd, gw)),
            (P(-hl, -gw), P(-hl + gd, -gw)),
            (P(hl - gd, gw), P(hl, gw)),
            (P(hl - gd, -gw), P(hl, -gw)),
        ]
        out: List[Landmark] = []
        out += [Landmark(LandmarkKind.GoalPost, i, p) for i, p in enumerate(posts)]
        out += [Landmark(LandmarkKind.TJunction, i, p) for i, p in enumerate(tjs)]
        out += [Landmark(LandmarkKind.CenterCircle, 0, P(0.0, 0.0))]
        out += [Landmark(LandmarkKind.LineSegment, i, a, b) for i, (a, b) in enumerate(lines)]
        return cls(out)


@dataclass(frozen=True)
class Observation:
    kind: LandmarkKind
    range: float
    bearing: float
    endpoints: Optional[Tuple[Point, Point]] = None  # egocentric, lines only

    def __post_init__(self) -> None:
        if not self.range > 0:
            raise ValueError("observation range must be positive")
        object.__setattr__(self, "bearing", normalize_angle(self.bearing))

    def local_point(self) -> Point:
        return (self.range * math.cos(self.bearing), self.range * math.sin(self.bearing))


@dataclass(frozen=True)
class OdometryDelta:
    dx: float
    dy: float
    dtheta: float


@dataclass(frozen=True)
class Hypothesis:
    pose: Pose2D
    weight: float
    age: int = 0


@dataclass(frozen=True)
class HypothesisBank:
    hypotheses: Tuple[Hypothesis, ...]
    dominance_streak: int = 0
    low_likelihood_streak: int = 0

    @property
    def weights(self) -> List[float]:
        return [h.weight for h in self.hypotheses]

    def best_index(self) -> int:
        best = 0
        for i, h in enumerate(self.hypotheses):
            if h.weight > self.hypotheses[best].weight:
                best = i
        return best

    def best(self) -> Hypothesis:
        return self.hypotheses[self.best_index()]


@dataclass(frozen=True)
class LocalizationConfig:
    # (range sigma m, bearing sigma rad) per landmark kind
    sigmas: Tuple[Tuple[str, float, float], ...] = (
        ("GoalPost", 0.2, 0.05),
        ("TJunction", 0.2, 0.05),
        ("CenterCircle", 0.2, 0.05),
        ("LineSegment", 0.15, 0.05),
    )
    correction_gain: float = 0.2
    heading_correction: bool = True
    translation_damping: float = 1e-3
    heading_damping: float = 2.0
    outlier_log_likelihood: float = -4.5
    dominance_ratio: float = 5.0
    min_age: int = 24
    weight_floor: float = 1e-30
    reinit_on_low_likelihood: bool = False
    low_likelihood_threshold: float = -8.0  # mean log-likelihood per observation
    low_likelihood_ticks: int = 40

    def sigma(self, kind: LandmarkKind) -> Tuple[float, float]:
        for name, sr, sb in self.sigmas:
            if name == kind.value:
                return sr, sb
        raise KeyError(kind)


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 4.0
    fov: float = math.radians(75.0)
    detection_probability: float = 0.9
    range_sigma: float = 0.0
    bearing_sigma: float = 0.0


# ---------------------------------------------------------------------------


def legal_placements(f: FieldModel, own_half_side: int = -1) -> List[Pose2D]:
    """Kickoff-legal placements: both touch lines in the own half facing the
    field, the center-circle edge and the goal-area front facing the opponent."""
    poses = [
        Pose2D(-f.length / 4, f.half_width, -math.pi / 2),
        Pose2D(-f.length / 4, -f.half_width, math.pi / 2),
        Pose2D(-f.center_circle_radius, 0.0, 0.0),
        Pose2D(-f.half_length + f.goal_area_depth, 0.0, 0.0),
    ]
    if own_half_side > 0:
        poses = [p.rotated_half_turn() for p in poses]
    return poses


def init_hypotheses(f: FieldModel, own_half_side: int = -1) -> HypothesisBank:
    poses = legal_placements(f, own_half_side)
    return HypothesisBank(tuple(Hypothesis(p, 1.0 / len(poses)) for p in poses))


def predict(bank: HypothesisBank, odo: OdometryDelta) -> HypothesisBank:
    if not bank.hypotheses:
        raise ValueError("empty hypothesis bank")
    if odo.dx == 0.0 and odo.dy == 0.0 and odo.dtheta == 0.0:
        return bank
    hyps = tuple(replace(h, pose=h.pose.compose(odo.dx, odo.dy, odo.dtheta)) for h in bank.hypotheses)
    return replace(bank, hypotheses=hyps)


def associate(obs_field: Point, robot: Point, candidates: Sequence[Landmark]) -> Tuple[Landmark, Point]:
    """Nearest landmark of the observation's kind; ties keep the smallest index."""
    best: Optional[Landmark] = None
    best_pred: Point = (0.0, 0.0)
    best_d = math.inf
    for lm in candidates:
        pred = lm.nearest_point(robot) if lm.b is not None else lm.a
        d = dist(pred, obs_field)
        if d < best_d - 1e-12:
            best, best_pred, best_d = lm, pred, d
    assert best is not None
    return best, best_pred


def _evaluate(pose: Pose2D, observations: Sequence[Observation], lmap: LandmarkMap, cfg: LocalizationConfig):
    """Log-likelihood and correction residuals of one pose.

    Residuals are ``(observed point, target point, line normal or None)`` in
    the field frame; a line only constrains the component along its normal.
    """
    ll = 0.0
    residuals: List[Tuple[Point, Point, Optional[Point]]] = []
    robot = pose.position
    for obs in observations:
        cands = lmap.by_kind[obs.kind]
        if not cands:
            continue
        p_obs = pose.to_field(obs.local_point())
        lm, pred = associate(p_obs, robot, cands)
        sr, sb = cfg.sigma(obs.kind)
        rel = pose.to_local(pred)
        r_pred = math.hypot(rel[0], rel[1])
        b_pred = math.atan2(rel[1], rel[0])
        dr = (obs.range - r_pred) / sr
        db = normalize_angle(obs.bearing - b_pred) / sb
        ll += max(-0.5 * (dr * dr + db * db), cfg.outlier_log_likelihood)
        if lm.b is None:
            residuals.append((p_obs, lm.a, None))
        else:
            ux, uy = lm.b[0] - lm.a[0], lm.b[1] - lm.a[1]
            n = math.hypot(ux, uy)
            residuals.append((p_obs, lm.nearest_point(p_obs), (-uy / n, ux / n)))
    return ll, residuals


def _solve3(m: List[List[float]], v: List[float]) -> Optional[List[float]]:
    (a, b, c), (d, e, f_), (g, h, i) = m
    det = a * (e * i - f_ * h) - b * (d * i - f_ * g) + c * (d * h - e * g)
    if abs(det) < 1e-15:
        return None
    x = (v[0] * (e * i - f_ * h) - b * (v[1] * i - f_ * v[2]) + c * (v[1] * h - e * v[2])) / det
    y = (a * (v[1] * i - f_ * v[2]) - v[0] * (d * i - f_ * g) + c * (d * v[2] - v[1] * g)) / det
    z = (a * (e * v[2] - v[1] * h) - b * (d * v[2] - v[1] * g) + v[0] * (d * h - e * g)) / det
    return [x, y, z]


def _correct(pose: Pose2D, residuals, cfg: LocalizationConfig) -> Pose2D:
    """Damped step toward the least-squares pose correction.

    Unknowns are a translation and a rotation about the robot. A small ridge
    term keeps unobservable directions at zero; the heading term is damped
    harder because heading comes mainly from the gyro.
    """
    rx0, ry0 = pose.position
    ata = [[0.0] * 3 for _ in range(3)]
    atb = [0.0, 0.0, 0.0]

    def add(row: Tuple[float, float, float], e: float) -> None:
        for i in range(3):
            atb[i] += row[i] * e
            for j in range(3):
                ata[i][j] += row[i] * row[j]

    for (px, py), (qx, qy), normal in residuals:
        lx, ly = px - rx0, py - ry0
        rot_x, rot_y = (-ly, lx) if cfg.heading_correction else (0.0, 0.0)
        if normal is None:
            add((1.0, 0.0, rot_x), qx - px)
            add((0.0, 1.0, rot_y), qy - py)
        else:
            nx, ny = normal
            add((nx, ny, nx * rot_x + ny * rot_y), nx * (qx - px) + ny * (qy - py))
    ata[0][0] += cfg.translation_damping
    ata[1][1] += cfg.translation_damping
    ata[2][2] += cfg.heading_damping
    sol = _solve3(ata, atb)
    if sol is None:
        return pose
    g = cfg.correction_gain
    return Pose2D(pose.x + g * sol[0], pose.y + g * sol[1], pose.theta + g * sol[2])


def _clamp_to(pose: Pose2D, bounds: Tuple[float, float, float, float]) -> Pose2D:
    x0, x1, y0, y1 = bounds
    if x0 <= pose.x <= x1 and y0 <= pose.y <= y1:
        return pose
    return Pose2D(min(max(pose.x, x0), x1), min(max(pose.y, y0), y1), pose.theta)


def update(
    bank: HypothesisBank,
    observations: Sequence[Observation],
    f: FieldModel,
    cfg: LocalizationConfig = LocalizationConfig(),
    lmap: Optional[LandmarkMap] = None,
) -> HypothesisBank:
    """Reweight and nudge every hypothesis with one batch of observations."""
    if not observations or not bank.hypotheses:
        return bank
    lmap = lmap or LandmarkMap.from_field(f)
    evaluated = [_evaluate(h.pose, observations, lmap, cfg) for h in bank.hypotheses]
    lls = [ll for ll, _ in evaluated]
    top = max(lls)
    raw = [h.weight * math.exp(ll - top) for h, ll in zip(bank.hypotheses, lls)]
    total = sum(raw)
    if total <= 0.0:
        raw = [1.0] * len(raw)
        total = float(len(raw))
    weights = [max(w / total, cfg.weight_floor) for w in raw]
    norm = sum(weights)
    hyps = []
    for h, w, (_, pairs) in zip(bank.hypotheses, weights, evaluated):
        pose = _clamp_to(_correct(h.pose, pairs, cfg), lmap.bounds) if pairs else h.pose
        hyps.append(Hypothesis(pose, w / norm, h.age))
    streak = bank.low_likelihood_streak
    best_ll = lls[max(range(len(lls)), key=lambda i: weights[i])] / len(observations)
    streak = streak + 1 if best_ll < cfg.low_likelihood_threshold else 0
    out = HypothesisBank(tuple(hyps), bank.dominance_streak, streak)
    if cfg.reinit_on_low_likelihood and streak >= cfg.low_likelihood_ticks:
        return init_hypotheses(f)
    return out


def prune_and_select(
    bank: HypothesisBank,
    min_age: int = 24,
    dominance_ratio: float = 5.0,
) -> Tuple[HypothesisBank, Pose2D]:
    """Winner-take-all pruning once one hypothesis dominates for ``min_age`` ticks."""
    if not bank.hypotheses:
        raise ValueError("empty hypothesis bank")
    hyps = tuple(replace(h, age=h.age + 1) for h in bank.hypotheses)
    bank = replace(bank, hypotheses=hyps)
    best_i = bank.best_index()
    if len(hyps) == 1:
        return replace(bank, dominance_streak=0), hyps[0].pose
    others = sorted((h.weight for i, h in enumerate(hyps) if i != best_i), reverse=True)
    dominant = hyps[best_i].weight >= dominance_ratio * others[0]
    streak = bank.dominance_streak + 1 if dominant else 0
    if streak >= min_age:
        winner = Hypothesis(hyps[best_i].pose, 1.0, hyps[best_i].age)
        return HypothesisBank((winner,), 0, bank.low_likelihood_streak), winner.pose
    return replace(bank, dominance_streak=streak), hyps[best_i].pose


# ---------------------------------------------------------------------------
# Simulated sensing


def simulate_observations(
    true_pose: Pose2D,
    lmap: LandmarkMap,
    sensor: SensorModel,
    rng: Optional[random.Random] = None,
) -> List[Observation]:
    """Camera-like landmark detections from the true pose.

    A landmark is observable within ``max_range`` and ``fov`` of the heading
    (for lines: their closest point). Each is detected with
    ``detection_probability`` and perturbed with Gaussian range/bearing noise.
    """
    out: List[Observation] = []
    for lm in lmap.landmarks:
        p = lm.nearest_point(true_pose.position)
        rel = true_pose.to_local(p)
        r = math.hypot(rel[0], rel[1])
        if r > sensor.max_range or r < 1e-6:
            continue
        b = math.atan2(rel[1], rel[0])
        if abs(b) > sensor.fov:
            continue
        if rng is not None and sensor.detection_probability < 1.0 and rng.random() >= sensor.detection_probability:
            continue
        if rng is not None and sensor.range_sigma > 0:
            r = max(1e-3, r + rng.gauss(0.0, sensor.range_sigma))
        if rng is not None and sensor.bearing_sigma > 0:
            b = b + rng.gauss(0.0, sensor.bearing_sigma)
        endpoints = None
        if lm.b is not None:
            endpoints = (true_pose.to_local(lm.a), true_pose.to_local(lm.b))
        out.append(Observation(lm.kind, r, b, endpoints))
    return out


@dataclass
class Localizer:
    """Per-robot bank plus the pruning schedule."""

    field: FieldModel
    config: LocalizationConfig = field(default_factory=LocalizationConfig)
    lmap: Optional[LandmarkMap] = None
    bank: Optional[HypothesisBank] = None
    estimate: Optional[Pose2D] = None

    def __post_init__(self) -> None:
        if self.lmap is None:
            self.lmap = LandmarkMap.from_field(self.field)
        if self.bank is None:
            self.reset()

    def reset(self) -> None:
        self.bank = init_hypotheses(self.field)
        self.estimate = self.bank.best().pose

    def step(self, odo: OdometryDelta, observations: Sequence[Observation]) -> Pose2D:
        bank = predict(self.bank, odo)
        bank = update(bank, observations, self.field, self.config, self.lmap)
        self.bank, self.estimate = prune_and_select(bank, self.config.min_age, self.config.dominance_ratio)
        return self.estimate
