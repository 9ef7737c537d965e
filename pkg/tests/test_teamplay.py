import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soccercoord.geometry import FieldModel, Pose2D
from soccercoord.netcomms import Bus, BusConfig, NegotiationPayload, TeamMessage
from soccercoord.tasks import NegotiationKind, Role, Task
from soccercoord.teamplay import (
    ClearOutDecision,
    NegotiationState,
    SelfView,
    TaskManager,
    TeamplayConfig,
    VoteBuffer,
    broadcast_clearout,
    clearout_decision,
    compose_status,
    desired_task,
    dive_signal,
    initial_tasks,
    possession_cost,
    vote,
)
from soccercoord.verify import ExchangeCase, StressConfig, all_cases, model_check, run_exchange, stress_run

F = FieldModel()
FP, GK = Role.FieldPlayer, Role.Goalkeeper


def me(rid, x, y, ball=(0.0, 0.0), role=FP, **kw):
    return SelfView(rid, role, Pose2D(x, y, 0.0), ball, **kw)


def status(rid, x, y, task, ball=(0.0, 0.0), t=0.0, role=FP, **kw):
    return TeamMessage(
        sender_id=rid, send_time=t, task=task, robot_pose=Pose2D(x, y, 0.0),
        ball_visible=ball is not None, ball_location=ball, role=role, **kw,
    )


class TestVote:
    def test_five_identical(self):
        b = VoteBuffer(5)
        assert [vote(b, "A") for _ in range(5)] == [None] * 4 + ["A"]

    def test_four_then_different(self):
        b = VoteBuffer(5)
        for _ in range(4):
            b.push("A")
        assert b.push("B") is None and b.streak == 1

    def test_alternating_never(self):
        b = VoteBuffer(4)
        assert all(b.push(k % 2) is None for k in range(1000))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from("AB"), max_size=40), st.integers(1, 6))
    def test_confirm_iff_last_n_agree(self, pushes, n):
        b = VoteBuffer(n)
        for i, d in enumerate(pushes):
            out = b.push(d)
            tail = pushes[max(0, i - n + 1): i + 1]
            agree = len(tail) == n and all(x == d for x in tail)
            assert (out == d) == agree

    def test_bad_size(self):
        with pytest.raises(ValueError):
            VoteBuffer(0)


class TestDesiredTask:
    def test_solo(self):
        assert desired_task(me(2, -3, 0), [], F) is Task.Attack

    def test_cost_comparison(self):
        # both behind the ball on the shot line: zero alignment penalty
        assert possession_cost(Pose2D(-1, 0, 0), (0, 0), F) == pytest.approx(1.0)
        inbox = [status(3, -3.0, 0.0, Task.Defend)]
        assert desired_task(me(2, -1.0, 0.0), inbox, F) is Task.Attack
        inbox = [status(3, -0.5, 0.0, Task.Attack)]
        assert desired_task(me(2, -1.0, 0.0), inbox, F) is Task.Defend

    def test_alignment_penalty(self):
        # in front of the ball costs pi/2 more than the same distance behind
        behind = possession_cost(Pose2D(-1, 0, 0), (0, 0), F)
        front = possession_cost(Pose2D(1, 0, 0), (0, 0), F)
        assert front - behind == pytest.approx(0.5 * math.pi)

    def test_tie_by_id(self):
        inbox = [status(3, 1.0, 0.0, Task.Defend, ball=(2.0, 0.0))]
        assert desired_task(me(2, -1.0, 0.0), inbox, F) is Task.Attack
        inbox = [status(1, 1.0, 0.0, Task.Defend, ball=(2.0, 0.0))]
        assert desired_task(me(2, -1.0, 0.0), inbox, F) is Task.Defend

    def test_stale_teammate_absent(self):
        bus = Bus(BusConfig(), [2, 3], seed=0)
        bus.broadcast(status(3, -0.1, 0.0, Task.Attack), 0.0)
        assert desired_task(me(2, -3, 0), bus.inbox(2, 1.0), F) is Task.Defend
        assert desired_task(me(2, -3, 0), bus.inbox(2, 6.0), F) is Task.Attack

    def test_fallen_or_inactive_ignored(self):
        inbox = [status(3, -0.1, 0.0, Task.Attack, fallen=True), status(4, -0.1, 0.0, Task.Defend, active=False)]
        assert desired_task(me(2, -3, 0), inbox, F) is Task.Attack

    def test_goalkeeper_and_clearout(self):
        assert desired_task(me(1, -4, 0, role=GK), [], F) is Task.KeepGoal
        assert desired_task(me(2, 0, 0), [], F, clearout_active=True) is Task.WaitClearOut

    def test_initial_tasks(self):
        roster = [(1, GK), (3, FP), (2, FP)]
        assert initial_tasks(roster) == {1: Task.KeepGoal, 2: Task.Attack, 3: Task.Defend}
        assert initial_tasks(roster, teamplay=False) == {1: Task.KeepGoal, 2: Task.Attack, 3: Task.Attack}


class Pair:
    """Striker 2 and defender 3 wired together by hand."""

    def __init__(self, striker_ball=(1.0, 0.0), defender_ball=(1.0, 0.0), striker_reports_ball=True):
        self.s = TaskManager(2, FP, F, initial_task=Task.Attack)
        self.d = TaskManager(3, FP, F, initial_task=Task.Defend)
        self.sv = me(2, -2.0, 0.0, striker_ball)
        self.dv = me(3, 0.5, 0.0, defender_ball)
        self.reported = self.sv if striker_reports_ball else me(2, -2.0, 0.0, None)

    def msg(self, tm, view, t, payload=None):
        return compose_status(tm, view, t, payload)

    def start(self, t=0.0):
        inbox = [self.msg(self.s, self.reported, t)]
        for k in range(4):
            res = self.d.tick(t + 0.12 * k, self.dv, inbox)
        assert [p.kind for p in res.outgoing] == [NegotiationKind.Request]
        return res.outgoing[0], t + 0.36


class TestHandshake:
    def test_full_exchange(self):
        pair = Pair()
        req, t = pair.start()
        assert pair.d.neg.state is NegotiationState.RequestSent and pair.d.task is Task.Defend
        r1 = pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        assert pair.s.task is Task.ChangeTask and [p.kind for p in r1.outgoing] == [NegotiationKind.Accept]
        assert (pair.s.task, pair.d.task).count(Task.Attack) == 0
        r2 = pair.d.handle_negotiation(t, pair.msg(pair.s, pair.sv, t, r1.outgoing[0]), pair.dv)
        assert pair.d.task is Task.Attack and [p.kind for p in r2.outgoing] == [NegotiationKind.Confirm]
        assert pair.s.task is Task.ChangeTask
        r3 = pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, r2.outgoing[0]), pair.sv)
        assert pair.s.task is Task.Defend and pair.d.task is Task.Attack
        causes = [c.cause for c in r1.changes + r2.changes + r3.changes]
        assert causes == ["NegotiationRequested", "NegotiationAccepted", "NegotiationConfirmed"]

    def test_reject(self):
        # the striker's last status showed no ball; it sees one at its feet now
        pair = Pair(striker_ball=(-1.9, 0.0), striker_reports_ball=False)
        req, t = pair.start()
        r1 = pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        assert [p.kind for p in r1.outgoing] == [NegotiationKind.Reject]
        pair.d.handle_negotiation(t, pair.msg(pair.s, pair.sv, t, r1.outgoing[0]), pair.dv)
        assert pair.s.task is Task.Attack and pair.d.task is Task.Defend
        assert pair.d.neg.state is NegotiationState.Idle

    def test_accept_lost_timeouts(self):
        pair = Pair()
        req, t = pair.start()
        pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        # Accept never arrives
        late = t + 1.1
        pair.d.tick(late, pair.dv, [pair.msg(pair.s, pair.sv, late)])
        assert pair.d.task is Task.Defend and pair.d.neg.state is NegotiationState.Idle
        # striker waits for a status sent after the requester's deadline
        pair.s.tick(late, pair.sv, [pair.msg(pair.d, pair.dv, t + 0.5)])
        assert pair.s.task is Task.ChangeTask
        pair.s.tick(late + 0.12, pair.sv, [pair.msg(pair.d, pair.dv, late)])
        assert pair.s.task is Task.Attack and pair.s.neg.state is NegotiationState.Idle

    def test_confirm_lost_inferred(self):
        pair = Pair()
        req, t = pair.start()
        r1 = pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        pair.d.handle_negotiation(t, pair.msg(pair.s, pair.sv, t, r1.outgoing[0]), pair.dv)
        late = t + 1.2
        res = pair.s.tick(late, pair.sv, [pair.msg(pair.d, pair.dv, late)])
        assert pair.s.task is Task.Defend
        assert [c.cause for c in res.changes] == ["ConfirmInferred"]

    def test_late_accept_ignored(self):
        pair = Pair()
        req, t = pair.start()
        r1 = pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        res = pair.d.handle_negotiation(t + 1.01, pair.msg(pair.s, pair.sv, t, r1.outgoing[0]), pair.dv)
        assert pair.d.task is Task.Defend and not res.outgoing

    def test_mismatched_confirm_ignored(self):
        pair = Pair()
        req, t = pair.start()
        pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        bogus = NegotiationPayload(NegotiationKind.Confirm, 2, req.nonce + 1, req.request_time)
        pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, bogus), pair.sv)
        assert pair.s.task is Task.ChangeTask

    def test_request_while_changetask_rejected(self):
        pair = Pair()
        req, t = pair.start()
        pair.s.handle_negotiation(t, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        other = TaskManager(4, FP, F, initial_task=Task.Defend)
        req2 = NegotiationPayload(NegotiationKind.Request, 2, 99, t)
        res = pair.s.handle_negotiation(t, compose_status(other, me(4, 0.9, 0.0, (1.0, 0.0)), t, req2), pair.sv)
        assert [p.kind for p in res.outgoing] == [NegotiationKind.Reject]

    def test_expired_request_rejected(self):
        pair = Pair()
        req, t = pair.start()
        res = pair.s.handle_negotiation(t + 1.5, pair.msg(pair.d, pair.dv, t, req), pair.sv)
        assert [p.kind for p in res.outgoing] == [NegotiationKind.Reject] and pair.s.task is Task.Attack

    def test_striker_never_initiates(self):
        pair = Pair(striker_ball=(1.0, 0.0))
        inbox = [pair.msg(pair.d, me(3, 5.0, 0.0), 0.0)]
        for k in range(50):
            assert not pair.s.tick(0.12 * k, pair.sv, inbox).outgoing


class TestModelCheck:
    def test_exhaustive_no_double_striker(self):
        report = model_check()
        assert len(report.results) == len(all_cases()) == 2 * 8 * 27 * 2
        assert report.violations == []
        assert all(r.exchange_started for r in report.results)

    def test_reachable_states_cover_handshake(self):
        reach = model_check().reachable
        assert ("ChangeTask", "AwaitConfirm", "Defend", "RequestSent") in reach
        assert ("ChangeTask", "AwaitConfirm", "Attack", "Idle") in reach
        assert all(not (a == "Attack" and b == "Attack") for a, _, b, _ in reach)

    def test_liveness_after_exchange(self):
        for r in model_check().results:
            expected = (Task.Defend, Task.Attack) if r.case.shape == "accept" else (Task.Attack, Task.Defend)
            assert r.final_tasks == expected, r.case

    def test_checker_detects_unguarded_timeout(self):
        class Naive(TaskManager):
            def _check_timeouts(self, now, others, res):
                if self.neg.state is NegotiationState.AwaitConfirm and now > self.neg.deadline:
                    self._resolve_await(now, Task.Attack, "NegotiationTimeout", res)
                else:
                    super()._check_timeouts(now, others, res)

        report = model_check([ExchangeCase("accept", frozenset({"Confirm"}))], manager_factory=Naive)
        assert report.violations


class TestClearOut:
    def test_decisions(self):
        assert clearout_decision((-4.3, 0.0), [], F) is ClearOutDecision.ClearOut
        assert clearout_decision((-2.5, 1.0), [(-1.8, 0.0)], F) is ClearOutDecision.ClearOut
        assert clearout_decision((-2.5, 1.0), [(-2.5, 0.0)], F) is ClearOutDecision.HoldLaterally
        assert clearout_decision((1.0, 0.0), [], F) is ClearOutDecision.PassiveGaze
        assert clearout_decision(None, [], F) is ClearOutDecision.HoldLaterally

    def test_broadcast_directives(self):
        assert broadcast_clearout(True, [2, 3]) == {2: Task.WaitClearOut, 3: Task.WaitClearOut}
        assert broadcast_clearout(False, [2, 3]) == {}

    def test_goalkeeper_announces_after_votes(self):
        gk = TaskManager(1, GK, F)
        view = me(1, -4.2, 0.0, (-4.3, 0.5), role=GK)
        flags = []
        for k in range(5):
            gk.tick(0.12 * k, view, [])
            flags.append(gk.announcing)
        assert flags == [False, False, False, True, True]
        gk.tick(1.0, me(1, -4.2, 0.0, (2.0, 0.0), role=GK), [])
        assert not gk.announcing and gk.task is Task.KeepGoal

    def test_waiters_ignored_for_presence(self):
        gk = TaskManager(1, GK, F)
        waiter = status(2, -2.8, 1.5, Task.WaitClearOut)
        assert gk.goalkeeper_decision(me(1, -4.2, 0, (-2.5, 0.0), role=GK), [waiter]) is ClearOutDecision.ClearOut

    def test_field_players_follow_announcement(self):
        s = TaskManager(2, FP, F, initial_task=Task.Attack)
        d = TaskManager(3, FP, F, initial_task=Task.Defend)
        gk_msg = status(1, -4.2, 0.0, Task.KeepGoal, role=GK, clearout=True)
        for tm, view in ((s, me(2, -1, 0)), (d, me(3, -2, 1))):
            res = tm.tick(0.0, view, [gk_msg])
            assert tm.task is Task.WaitClearOut
            assert res.changes[0].cause == "ClearOutAnnounced"
        s.tick(0.5, me(2, -1, 0), [status(1, -4.2, 0.0, Task.KeepGoal, role=GK, t=0.5)])
        assert s.task is Task.Attack
        # announcement stops arriving: it goes stale after the horizon
        striker = status(2, -1, 0, Task.Attack, t=4.9)
        d.tick(4.9, me(3, -2, 1), [gk_msg, striker])
        assert d.task is Task.WaitClearOut
        d.tick(5.1, me(3, -2, 1), [striker])
        assert d.task is Task.Defend

    def test_overlay_rejects_requests(self):
        s = TaskManager(2, FP, F, initial_task=Task.Attack)
        s.tick(0.0, me(2, -1, 0), [status(1, -4.2, 0.0, Task.KeepGoal, role=GK, clearout=True)])
        req = NegotiationPayload(NegotiationKind.Request, 2, 7, 0.0)
        res = s.handle_negotiation(0.1, status(3, 0.0, 0.0, Task.Defend, negotiation=req, t=0.1), me(2, -1, 0))
        assert [p.kind for p in res.outgoing] == [NegotiationKind.Reject]


class TestEgress:
    def test_striker_egress_vacancy(self):
        s = TaskManager(2, FP, F, initial_task=Task.Attack)
        d = TaskManager(3, FP, F, initial_task=Task.Defend)
        res = s.on_egress(10.0, "Penalized")
        assert s.task is Task.Defend and res.changes[0].cause == "Egress:Penalized"
        d.tick(9.9, me(3, -2, 0), [status(2, 0, 0, Task.Attack, t=9.9)])
        egress_msg = compose_status(s, me(2, 0, 0, None, active=False), 10.0)
        res = d.tick(10.02, me(3, -2, 0), [egress_msg])
        assert d.task is Task.Attack and res.changes[0].cause == "Vacancy"

    def test_defender_egress_keeps_striker(self):
        s = TaskManager(2, FP, F, initial_task=Task.Attack)
        d = TaskManager(3, FP, F, initial_task=Task.Defend)
        d.on_egress(1.0, "Penalized")
        s.tick(1.1, me(2, 0, 0), [compose_status(d, me(3, 0, 0, None, active=False), 1.0)])
        assert s.task is Task.Attack and d.task is Task.Defend

    def test_silence_needs_full_horizon(self):
        d = TaskManager(3, FP, F, initial_task=Task.Defend)
        d.tick(0.0, me(3, -2, 0), [])
        d.tick(4.9, me(3, -2, 0), [])
        assert d.task is Task.Defend
        d.tick(5.0, me(3, -2, 0), [])
        assert d.task is Task.Attack

    def test_lowest_id_adopts(self):
        a = TaskManager(2, FP, F, initial_task=Task.Defend)
        b = TaskManager(3, FP, F, initial_task=Task.Defend)
        gone = status(4, 0, 0, Task.Defend, active=False)
        a.tick(0.0, me(2, -2, 0), [gone, status(3, -1, 0, Task.Defend)])
        b.tick(0.0, me(3, -1, 0), [gone, status(2, -2, 0, Task.Defend)])
        assert (a.task, b.task) == (Task.Attack, Task.Defend)


class TestDebounceTiming:
    def run(self, better_at):
        d = TaskManager(3, FP, F, initial_task=Task.Defend)
        requests = []
        for k in range(500):  # 60 s at 0.12 s
            t = 0.12 * k
            striker = status(2, -1.0 if better_at(k) else 0.5, 0.0, Task.Attack, ball=(1.0, 0.0), t=t)
            res = d.tick(t, me(3, 0.0, 0.0, (1.0, 0.0)), [striker])
            if res.outgoing:
                requests.append(k)
                d.neg.state = NegotiationState.Idle  # drop the exchange; count requests only
        return requests

    def test_oscillating_never_requests(self):
        assert self.run(lambda k: k % 2 == 0) == []

    def test_steady_requests_on_fourth_cycle(self):
        reqs = self.run(lambda k: k >= 10)
        assert reqs[0] == 10 + 4 - 1


def test_static_world_single_reassignment():
    case = ExchangeCase("accept")
    r = run_exchange(case, horizon=20.0)
    assert r.final_tasks == (Task.Defend, Task.Attack)
    assert r.violations == []


def test_dive_signal():
    gk = Pose2D(-4.2, 0.0, 0.0)
    assert dive_signal((-2.0, 0.0), (-2.5, 1.0), gk, F) == 1
    assert dive_signal((-2.0, 0.0), (-2.5, -1.0), gk, F) == -1
    assert dive_signal((-2.0, 0.0), (-2.5, 0.0), gk, F) is None  # straight at the goalie
    assert dive_signal((-2.0, 0.0), (2.5, 0.0), gk, F) is None  # moving away
    assert dive_signal((-2.0, 0.0), (-0.5, 0.2), gk, F) is None  # too slow


@pytest.mark.parametrize("loss", [0.0, 0.1, 0.3, 0.6])
def test_short_stress(loss):
    r = stress_run(StressConfig(loss, seed=7, duration=120.0))
    assert r.violations == []
    assert r.task_changes > 0
