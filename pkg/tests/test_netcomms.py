import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soccercoord.geometry import Pose2D
from soccercoord.netcomms import Bus, BusConfig, NegotiationPayload, RateExceeded, TeamMessage
from soccercoord.tasks import NegotiationKind, Task


def msg(sender, t, **kw):
    return TeamMessage(sender_id=sender, send_time=t, task=Task.Defend, robot_pose=Pose2D(0, 0, 0), **kw)


def test_message_invariant():
    with pytest.raises(ValueError):
        msg(1, 0.0, ball_visible=False, ball_distance=1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        BusConfig(period=0)
    with pytest.raises(ValueError):
        BusConfig(staleness_horizon=0.1, period=0.125)
    with pytest.raises(ValueError):
        BusConfig(loss_probability=1.5)


def test_lossless_same_tick():
    bus = Bus(BusConfig(), [1, 2, 3], seed=0)
    bus.broadcast(msg(1, 0.0), 0.0)
    assert [m.sender_id for m in bus.inbox(2, 0.0)] == [1]
    assert [m.sender_id for m in bus.inbox(3, 0.0)] == [1]
    assert bus.inbox(1, 0.0) == []


def test_total_loss():
    bus = Bus(BusConfig(loss_probability=1.0), [1, 2], seed=0)
    for k in range(100):
        bus.broadcast(msg(1, k * 0.125), k * 0.125)
        assert bus.inbox(2, k * 0.125) == []


def test_loss_fraction():
    n = 10_000
    bus = Bus(BusConfig(loss_probability=0.3), [1, 2], seed=12)
    delivered = 0
    for k in range(n):
        t = k * 0.125
        bus.broadcast(msg(1, t), t)
        box = bus.inbox(2, t)
        delivered += bool(box) and box[0].send_time == t
    frac = delivered / n
    # 95% binomial interval half-width is ~0.009; spec tolerance is 0.02.
    assert abs(frac - 0.70) <= 0.02
    assert abs(frac - 0.70) <= 1.96 * math.sqrt(0.21 / n) * 2


@pytest.mark.parametrize("query,present", [(5.1, False), (4.9, True), (5.0, True)])
def test_staleness(query, present):
    bus = Bus(BusConfig(), [1, 2], seed=0)
    bus.broadcast(msg(1, 0.0), 0.0)
    assert bool(bus.inbox(2, query)) is present


def test_latest_wins():
    bus = Bus(BusConfig(), [1, 2], seed=0)
    bus.broadcast(msg(1, 0.0), 0.0)
    bus.broadcast(msg(1, 0.2), 0.2)
    box = bus.inbox(2, 0.3)
    assert len(box) == 1 and box[0].send_time == 0.2


def test_rate_limit():
    bus = Bus(BusConfig(), [1, 2], seed=0)
    bus.broadcast(msg(1, 0.0), 0.0)
    with pytest.raises(RateExceeded):
        bus.broadcast(msg(1, 0.1), 0.1)
    bus.broadcast(msg(1, 0.14), 0.14)
    # event-driven sends bypass the beat
    bus.send(msg(1, 0.15), 0.15)


def test_latency_and_negotiation_queue():
    bus = Bus(BusConfig(latency=0.3), [1, 2], seed=0)
    m = msg(1, 0.0, negotiation=NegotiationPayload(NegotiationKind.Request, to=2, nonce=7))
    bus.send(m, 0.0)
    assert bus.take_negotiation(2, 0.2) == []
    assert bus.inbox(2, 0.2) == []
    assert bus.take_negotiation(2, 0.3) == [m]
    assert bus.take_negotiation(2, 0.4) == []


def test_negotiation_only_for_addressee():
    bus = Bus(BusConfig(), [1, 2, 3], seed=0)
    bus.send(msg(1, 0.0, negotiation=NegotiationPayload(NegotiationKind.Request, to=3, nonce=1)), 0.0)
    assert bus.take_negotiation(2, 0.0) == []
    assert len(bus.take_negotiation(3, 0.0)) == 1
    assert len(bus.inbox(2, 0.0)) == 1


def test_link_loss_override():
    bus = Bus(BusConfig(), [1, 2, 3], seed=0)
    bus.link_loss[(1, 2)] = 1.0
    bus.broadcast(msg(1, 0.0), 0.0)
    assert bus.inbox(2, 0.0) == []
    assert len(bus.inbox(3, 0.0)) == 1


def test_never_empty_after_first_period():
    cfg = BusConfig(latency=0.05)
    bus = Bus(cfg, [1, 2, 3], seed=1)
    dt = 0.02
    for step in range(2000):
        now = step * dt
        for s in (1, 2, 3):
            if bus.due(s, now):
                bus.broadcast(msg(s, now), now)
        if now >= cfg.period + cfg.latency:
            for r in (1, 2, 3):
                assert len(bus.inbox(r, now)) == 2


def test_broadcast_period_measured():
    bus = Bus(BusConfig(), [1, 2], seed=0)
    times = []
    dt = 0.02
    for step in range(5000):
        now = step * dt
        if bus.due(1, now):
            bus.broadcast(msg(1, now), now)
            times.append(now)
    gaps = [b - a for a, b in zip(times, times[1:])]
    assert all(abs(g - 0.125) <= dt + 1e-9 for g in gaps)
    assert (times[-1] - times[0]) / (len(times) - 1) == pytest.approx(0.125, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(
    loss=st.sampled_from([0.0, 0.1, 0.5]),
    latency=st.floats(0.0, 0.4),
    jitter=st.floats(0.0, 0.1),
    seed=st.integers(0, 10_000),
    queries=st.lists(st.floats(0.0, 30.0), min_size=1, max_size=20),
)
def test_bus_properties(loss, latency, jitter, seed, queries):
    cfg = BusConfig(loss_probability=loss, latency=latency, jitter=jitter)
    bus = Bus(cfg, [1, 2, 3], seed=seed)
    log = []
    bus.listener = lambda op, s, r, m, cause, t: log.append((op, s, r, m, t))
    queries = sorted(queries)
    qi = 0
    for step in range(0, 1500):
        now = step * 0.02
        while qi < len(queries) and queries[qi] <= now:
            for r in (1, 2, 3):
                for m in bus.inbox(r, now):
                    assert m.sender_id != r
                    assert now - m.send_time <= cfg.staleness_horizon + 1e-9
            qi += 1
        for s in (1, 2, 3):
            if bus.due(s, now):
                bus.broadcast(msg(s, now), now)
    bus.deliver_due(1e9)
    delivers = [(s, r, m, t) for op, s, r, m, t in log if op == "deliver"]
    for s, r, m, t in delivers:
        assert s != r
        assert t >= m.send_time + max(0.0, latency - jitter) - 1e-9
    if jitter == 0.0:
        for s in (1, 2, 3):
            for r in (1, 2, 3):
                seq = [m.send_time for ss, rr, m, _ in delivers if ss == s and rr == r]
                assert seq == sorted(seq)
