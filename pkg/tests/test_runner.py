import dataclasses
import io
import json
import os

import pytest

from soccercoord.checker import Checker, check_records, check_trace
from soccercoord.cli import main
from soccercoord.geometry import FieldModel
from soccercoord.replay import OutOfRange, render_text, snapshot_at
from soccercoord.runner import run_scenario
from soccercoord.scenario import Fault, load_scenario
from soccercoord.simkernel import auto_position_targets, pose_from_team_frame
from soccercoord.tasks import Role
from soccercoord.trace import TraceError, iter_records, read_trace

HERE = os.path.dirname(__file__)
SCENARIOS = os.path.join(HERE, "..", "scenarios")


def scenario(name, **overrides):
    return load_scenario(os.path.join(SCENARIOS, f"{name}.yaml")).with_overrides(**overrides)


def run_to_file(sc, path):
    with open(path, "w", encoding="utf-8") as fh:
        result = run_scenario(sc, fh)
    return result, read_trace(str(path))


@pytest.fixture(scope="module")
def match(tmp_path_factory):
    path = tmp_path_factory.mktemp("match") / "match.jsonl"
    result, trace = run_to_file(scenario("match_3v3", duration=20.0), path)
    return result, trace, path


@pytest.fixture(scope="module")
def own_area(tmp_path_factory):
    d = tmp_path_factory.mktemp("own")
    out = {}
    for teamplay in (True, False):
        path = d / f"own_{teamplay}.jsonl"
        out[teamplay] = (*run_to_file(scenario("own_area_ball", teamplay=teamplay), path), path)
    return out


def events(trace, name):
    return [r for r in trace.records if r["kind"] == "Event" and r.get("event") == name]


class TestRun:
    def test_identical_bytes(self, tmp_path):
        sc = scenario("match_3v3", duration=10.0)
        a, b = io.StringIO(), io.StringIO()
        run_scenario(sc, a)
        run_scenario(sc, b)
        assert a.getvalue() == b.getvalue() and a.getvalue().count("\n") > 100

    def test_seed_changes_noisy_run(self):
        sc = scenario("noisy_match", duration=5.0)
        a, b = io.StringIO(), io.StringIO()
        run_scenario(sc, a)
        run_scenario(sc.with_overrides(seed=sc.seed + 1), b)
        assert a.getvalue() != b.getvalue()

    def test_summary_fields(self, match):
        result, trace, _ = match
        s = result.summary
        for key in ("goals", "task_changes", "negotiation", "violations", "localization_error", "illegal_defense_events"):
            assert key in s
        assert trace.records[-1]["kind"] == "End" and trace.records[-1]["summary"] == json.loads(json.dumps(s))
        assert result.exit_code == 0 and s["safety_violations"] == 0

    def test_records_time_ordered(self, match):
        _, trace, _ = match
        keys = [(r["time"], r["seq"]) for r in trace.records]
        assert keys == sorted(keys) and len({r["seq"] for r in trace.records}) == len(keys)
        for r in trace.of_kind("TaskChange"):
            assert r["prior"] != r["new"] and r["cause"]

    def test_broadcast_period(self, match):
        _, trace, _ = match
        times = {}
        for m in trace.of_kind("Message"):
            if m["cause"] == "status":
                times.setdefault(m["sender"], []).append(m["time"])
        for ts in times.values():
            gaps = [b - a for a, b in zip(ts, ts[1:])]
            assert all(abs(g - 0.125) <= 0.02 + 1e-9 for g in gaps)
            assert abs((ts[-1] - ts[0]) / (len(ts) - 1) - 0.125) < 1e-3

    def test_inbox_never_stale(self, match):
        _, trace, _ = match
        for t in trace.of_kind("Tick"):
            for r in t["robots"]:
                assert all(t["time"] - st <= 5.0 + 1e-9 for _, st in r["inbox"])


class TestIllegalDefense:
    def test_disabled_fires_after_ten_seconds(self, own_area):
        result, trace, _ = own_area[False]
        calls = events(trace, "IllegalDefense")
        assert calls and result.exit_code == 1
        for c in calls:
            assert abs(c["time"] - c["onset"] - 10.0) <= 0.02 + 1e-9
        assert [f.rule for f in result.findings] == ["IllegalDefense"] * len(calls)

    def test_enabled_keeps_area_clear(self, own_area):
        result, trace, _ = own_area[True]
        assert not events(trace, "IllegalDefense") and result.exit_code == 0
        assert all(e["count"] <= 1 for e in events(trace, "AreaOccupancy"))
        waits = [r for r in trace.of_kind("TaskChange") if r["new"] == "WaitClearOut"]
        assert {r["robot"] for r in waits} == {2, 3}


class TestEgress:
    @staticmethod
    def adoption(trace, at):
        return [r["time"] - at for r in trace.of_kind("TaskChange") if r["new"] == "Attack" and r["robot"] == 3 and r["time"] >= at]

    def test_lossless_handover_within_two_beats(self, tmp_path):
        _, trace = run_to_file(scenario("striker_egress"), tmp_path / "e.jsonl")
        delay = self.adoption(trace, 6.0)
        assert delay and delay[0] <= 2 * 0.125

    def test_lost_egress_falls_back_to_staleness(self, tmp_path):
        sc = scenario("striker_egress")
        cut = Fault(6.0, "link_loss", team="blue", sender=2, receivers=(1, 3), loss=1.0)
        sc = dataclasses.replace(sc, faults=(cut,) + sc.faults)
        _, trace = run_to_file(sc, tmp_path / "e.jsonl")
        delay = self.adoption(trace, 6.0)
        assert delay and 4.8 < delay[0] <= 5.0 + 0.125
        assert [r["cause"] for r in trace.of_kind("TaskChange") if r["robot"] == 3][0] == "Vacancy"


class TestChecker:
    def test_clean_trace_empty_report(self, match):
        _, _, path = match
        report = check_trace(str(path))
        assert report.findings == [] and report.consistent_with_run

    def test_offline_matches_online(self, own_area):
        for _, (result, _, path) in own_area.items():
            report = check_trace(str(path))
            assert report.consistent_with_run
            assert len(report.findings) == len(result.findings)

    def _with(self, trace, inject, after_kind="Tick", nth=3):
        recs, seen, done = [], 0, False
        for r in trace.records:
            recs.append(r)
            if not done and r["kind"] == after_kind:
                seen += 1
                if seen == nth:
                    recs.extend(inject(r))
                    done = True
        return recs

    def rules(self, records):
        return [f.rule for f in check_records(records).findings]

    def test_double_attack_flagged(self, match):
        _, trace, _ = match
        attackers = [r["id"] for r in trace.records[0]["roster"] if r["task"] == "Attack" and r["team"] == "blue"]
        defender = next(r["id"] for r in trace.records[0]["roster"] if r["task"] == "Defend" and r["team"] == "blue")
        assert attackers
        tick_time = trace.of_kind("Tick")[0]["time"]
        fake = {"kind": "TaskChange", "time": tick_time, "seq": 10**9, "robot": defender, "team": "blue",
                "prior": "Defend", "new": "Attack", "cause": "Injected"}
        recs = [trace.records[0], fake] + trace.records[1:]
        assert "StrikerUniqueness" in self.rules(recs)

    def test_goalkeeper_change_flagged(self, match):
        _, trace, _ = match
        fake = lambda r: [{"kind": "TaskChange", "time": r["time"], "seq": 0, "robot": 1, "team": "blue",
                           "prior": "KeepGoal", "new": "Attack", "cause": "Injected"}]
        assert "GoalkeeperConstancy" in self.rules(self._with(trace, fake))

    def test_stale_inbox_flagged(self, match):
        _, trace, _ = match
        recs = [dict(r) for r in trace.records]
        tick = next(i for i, r in enumerate(recs) if r["kind"] == "Tick" and r["time"] > 6.0)
        robots = [dict(x) for x in recs[tick]["robots"]]
        robots[0]["inbox"] = robots[0]["inbox"] + [[99, recs[tick]["time"] - 5.5]]
        recs[tick] = {**recs[tick], "robots": robots}
        assert "Staleness" in self.rules(recs)

    def test_region_mismatch_flagged(self, match):
        _, trace, _ = match
        recs = [dict(r) for r in trace.records]
        tick = next(i for i, r in enumerate(recs) if r["kind"] == "Tick")
        goalies = [dict(g) for g in recs[tick]["goalies"]]
        goalies[0]["region"] = "Region1"
        recs[tick] = {**recs[tick], "goalies": goalies}
        assert "RegionConsistency" in self.rules(recs)

    def test_early_illegal_defense_call_flagged(self, own_area):
        _, trace, _ = own_area[False]
        recs = []
        for r in trace.records:
            if r["kind"] == "Event" and r.get("event") == "IllegalDefense":
                r = {**r, "time": r["time"] - 1.0}
            recs.append(r)
        recs.sort(key=lambda r: (r["time"], r["seq"]))
        assert "IllegalDefenseTiming" in self.rules(recs)

    def test_request_from_striker_flagged(self, match):
        _, trace, _ = match
        striker = next(r["id"] for r in trace.records[0]["roster"] if r["task"] == "Attack")
        fake = lambda r: [{"kind": "Message", "time": r["time"], "seq": 0, "team": "blue", "sender": striker,
                           "cause": "negotiation", "negotiation": {"kind": "Request", "to": 3, "nonce": 1}}]
        assert "RequestInitiation" in self.rules(self._with(trace, fake, nth=1))

    def test_checker_header_driven(self, match):
        _, trace, _ = match
        c = Checker(trace.records[0])
        assert c.limit == 10.0 and c.staleness == 5.0 and c.dt == 0.02


class TestTraceErrors:
    def test_truncated(self, match, tmp_path):
        _, _, path = match
        data = path.read_text()
        cut = data[: len(data) // 2]
        bad = tmp_path / "cut.jsonl"
        bad.write_text(cut)
        with pytest.raises(TraceError) as err:
            read_trace(str(bad))
        assert err.value.line == cut.count("\n") + 1

    def test_truncated_on_line_boundary(self, match, tmp_path):
        _, _, path = match
        lines = path.read_text().splitlines(keepends=True)
        bad = tmp_path / "cut.jsonl"
        bad.write_text("".join(lines[:50]))
        with pytest.raises(TraceError) as err:
            read_trace(str(bad))
        assert err.value.line == 51

    def test_corrupt_line_reported(self, match):
        _, _, path = match
        lines = path.read_text().splitlines(keepends=True)
        lines[7] = "{not json\n"
        with pytest.raises(TraceError) as err:
            list(iter_records(iter(lines)))
        assert err.value.line == 8

    def test_time_order_enforced(self, match):
        _, _, path = match
        lines = path.read_text().splitlines(keepends=True)
        late = next(i for i, l in enumerate(lines) if json.loads(l)["time"] > 1.0)
        lines[1], lines[late] = lines[late], lines[1]
        with pytest.raises(TraceError) as err:
            list(iter_records(iter(lines)))
        assert err.value.line == 2 or err.value.line == 3


class TestReplay:
    def test_kickoff_formation_at_zero(self, match):
        _, trace, _ = match
        snap = snapshot_at(trace, 0.0)
        for team, ids in (("blue", (1, 2, 3)), ("red", (4, 5, 6))):
            roster = [(1 if team == "blue" else 4, Role.Goalkeeper)] + [(i, Role.FieldPlayer) for i in ids[1:]]
            slots = auto_position_targets(roster, FieldModel(**trace.header["field"]), team == "blue")
            for r in snap.robots:
                if r.team == team:
                    expected = pose_from_team_frame(team, slots[r.id])
                    assert r.pose[:2] == pytest.approx([expected.x, expected.y])
        text = render_text(snap)
        assert "KeepGoal" in text and "#6" in text

    def test_out_of_range(self, match):
        _, trace, _ = match
        with pytest.raises(OutOfRange):
            snapshot_at(trace, trace.end_time + 1.0)
        with pytest.raises(OutOfRange):
            snapshot_at(trace, -0.5)

    def test_task_change_visible(self, match):
        _, trace, _ = match
        changes = trace.of_kind("TaskChange")
        assert changes
        for ch in changes[:10]:
            snap = snapshot_at(trace, ch["time"])
            later = [c for c in changes if c["time"] == ch["time"] and c["robot"] == ch["robot"]]
            assert next(r for r in snap.robots if r.id == ch["robot"]).task == later[-1]["new"]


class TestCli:
    def test_run_check_replay(self, tmp_path, capsys):
        out = tmp_path / "t.jsonl"
        sc = os.path.join(SCENARIOS, "own_area_ball.yaml")
        assert main(["run", "--scenario", sc, "--out", str(out), "--duration", "15"]) == 0
        assert main(["check", str(out)]) == 0
        assert main(["run", "--scenario", sc, "--out", str(out), "--duration", "20", "--disable-teamplay"]) == 1
        assert main(["check", str(out)]) == 1
        assert main(["replay", str(out), "--at", "0"]) == 0
        assert "Goalkeeper" in capsys.readouterr().out
        assert main(["replay", str(out), "--at", "100"]) == 2

    def test_seed_and_loss_overrides(self, tmp_path):
        out = tmp_path / "t.jsonl"
        sc = os.path.join(SCENARIOS, "match_3v3.yaml")
        assert main(["run", "--scenario", sc, "--out", str(out), "--duration", "2", "--seed", "99", "--loss", "0.5"]) == 0
        header = read_trace(str(out)).header
        assert header["seed"] == 99 and header["loss"] == 0.5 and header["duration"] == 2.0

    def test_usage_errors(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as e:
            main(["run"])
        assert e.value.code == 2
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\nteams:\n  blue: [{id: 1, role: Keeper}]\n")
        assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "line 3" in capsys.readouterr().err
        assert main(["check", str(tmp_path / "missing.jsonl")]) == 2

    def test_export_diagram(self, match, tmp_path):
        pytest.importorskip("matplotlib")
        _, _, path = match
        png = tmp_path / "snap.png"
        assert main(["replay", str(path), "--at", "1.0", "--export", str(png)]) == 0
        assert png.stat().st_size > 1000
