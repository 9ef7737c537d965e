"""Helpers shared by several test modules."""
import math
import random
import statistics

from soccercoord.geometry import FieldModel, Pose2D, dist
from soccercoord.localization import (
    LocalizationConfig,
    Localizer,
    OdometryDelta,
    SensorModel,
    legal_placements,
    simulate_observations,
)


def localization_walk(
    seed,
    start_index=0,
    seconds=60.0,
    tick=0.12,
    range_sigma=0.1,
    bearing_sigma=0.05,
    odometry_sigma=0.02,
    gyro_sigma=0.005,
    detection_probability=0.9,
    field=None,
):
    """Walk a wavy path from a legal placement; return per-tick errors and the localizer."""
    f = field or FieldModel()
    rng = random.Random(seed)
    loc = Localizer(f, LocalizationConfig())
    true = legal_placements(f)[start_index]
    sensor = SensorModel(range_sigma=range_sigma, bearing_sigma=bearing_sigma, detection_probability=detection_probability)
    noisy = range_sigma > 0 or bearing_sigma > 0 or odometry_sigma > 0 or detection_probability < 1
    errors = []
    survivors = []
    for k in range(int(round(seconds / tick))):
        nxt = true.compose(0.2 * tick, 0.0, 0.25 * math.sin(0.05 * k) * tick)
        if not f.contains(nxt.position, -0.3):
            nxt = true.compose(0.0, 0.0, 0.8)
        rel = true.to_local(nxt.position)
        dth = nxt.theta - true.theta
        dth = math.atan2(math.sin(dth), math.cos(dth))
        if noisy:
            odo = OdometryDelta(
                rel[0] * (1 + rng.gauss(0, odometry_sigma)),
                rel[1] + rng.gauss(0, odometry_sigma * 0.05),
                dth + rng.gauss(0, gyro_sigma),
            )
        else:
            odo = OdometryDelta(rel[0], rel[1], dth)
        true = nxt
        obs = simulate_observations(true, loc.lmap, sensor, rng)
        est = loc.step(odo, obs)
        errors.append(dist(est.position, true.position))
        survivors.append(len(loc.bank.hypotheses))
    return errors, loc, true


def median(xs):
    return statistics.median(xs)
