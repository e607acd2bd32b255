from __future__ import annotations

import math
import time

import pytest

from aide.errors import IllegalTransition, UnknownProposal
from aide.monitor import MonitorScheduler

from conftest import make_trace_record

HOUR = 3_600_000
NOW = 100 * HOUR


def hallucination_rule(**overrides):
    raw = {
        "rule_id": "high-hallucination",
        "project_id": "demo",
        "filter": [],
        "window_ms": HOUR,
        "trigger": {
            "aggregate": "mean_of",
            "metric": "hallucination",
            "comparator": "ge",
            "threshold": 0.6,
            "min_matches": 1,
        },
        "action": "propose_prompt_change",
        "cooldown_ms": 10 * 60 * 1000,
        "action_params": {"subject": "qa"},
    }
    raw.update(overrides)
    return raw


def log_scored(server, scores, base=NOW - HOUR // 2):
    ids = []
    for i, s in enumerate(scores):
        result = server.log_trace(
            "demo",
            make_trace_record(start_time=base + i, scores={"hallucination": s}),
        )
        ids.append(result["trace_id"])
    return ids


def test_high_mean_fires_with_evidence(server):
    ids = log_scored(server, [0.6, 0.7, 0.7, 0.8, 0.7])
    server.register_rule("demo", hallucination_rule())
    proposal = server.monitor.tick("demo", "high-hallucination", now=NOW)
    assert proposal is not None
    assert set(proposal["evidence"]) == set(ids)
    assert proposal["evidence"] == list(reversed(ids))  # most recent first
    assert proposal["status"] == "open"
    assert proposal["subject"] == "qa"


def test_cooldown_suppresses_refire(server):
    log_scored(server, [0.9, 0.9])
    server.register_rule("demo", hallucination_rule())
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is not None
    assert server.monitor.tick("demo", "high-hallucination", now=NOW + 1000) is None
    # after cooldown the still-true condition fires again
    assert server.monitor.tick("demo", "high-hallucination", now=NOW + 10 * 60 * 1000) is not None


def test_empty_window_no_fire(server):
    server.register_rule("demo", hallucination_rule())
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is None


def test_min_matches_gate(server):
    log_scored(server, [0.9, 0.9])
    server.register_rule("demo", hallucination_rule(trigger={
        "aggregate": "mean_of", "metric": "hallucination",
        "comparator": "ge", "threshold": 0.6, "min_matches": 3,
    }))
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is None


def test_count_trigger_with_filter(server):
    for i in range(4):
        server.log_trace("demo", make_trace_record(start_time=NOW - 1000 - i, feedback=-1))
    server.log_trace("demo", make_trace_record(start_time=NOW - 1000, feedback=1))
    rule = {
        "rule_id": "unhappy-users",
        "project_id": "demo",
        "filter": [{"field": "feedback", "op": "eq", "value": -1}],
        "window_ms": HOUR,
        "trigger": {"aggregate": "count", "comparator": "ge", "threshold": 3, "min_matches": 1},
        "action": "alert",
        "cooldown_ms": 0,
    }
    server.register_rule("demo", rule)
    proposal = server.monitor.tick("demo", "unhappy-users", now=NOW)
    assert proposal is not None
    assert len(proposal["evidence"]) == 4


def test_evidence_capped_at_20(server):
    log_scored(server, [0.9] * 30)
    server.register_rule("demo", hallucination_rule())
    proposal = server.monitor.tick("demo", "high-hallucination", now=NOW)
    assert len(proposal["evidence"]) == 20


def test_evidence_resolves_via_get_trace(server):
    log_scored(server, [0.8, 0.9])
    server.register_rule("demo", hallucination_rule())
    proposal = server.monitor.tick("demo", "high-hallucination", now=NOW)
    for trace_id in proposal["evidence"]:
        assert server.get_trace("demo", trace_id)["trace"]["trace_id"] == trace_id


def test_window_excludes_old_traces(server):
    log_scored(server, [0.9, 0.9], base=NOW - 2 * HOUR)  # outside the window
    server.register_rule("demo", hallucination_rule())
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is None


def test_rule_errors_disable_after_three(server):
    server.register_rule("demo", hallucination_rule())
    state = server.monitor.rule_state("demo", "high-hallucination")

    # inject a poisoned index lookup
    original = server.index.traces_in_window
    server.index.traces_in_window = lambda *a: (_ for _ in ()).throw(RuntimeError("boom"))
    try:
        for _ in range(3):
            assert server.monitor.tick("demo", "high-hallucination", now=NOW) is None
    finally:
        server.index.traces_in_window = original
    assert state.disabled is True
    # a disabled-rule alert proposal was queued
    proposals = server.list_proposals(status="open")["proposals"]
    assert any("disabled after 3 consecutive errors" in p["description"] for p in proposals)
    # disabled rules no longer tick
    log_scored(server, [0.9, 0.9])
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is None


def test_register_then_list(server):
    server.register_rule("demo", hallucination_rule())
    rules = server.list_rules("demo")["rules"]
    assert len(rules) == 1
    assert rules[0]["rule_id"] == "high-hallucination"
    assert rules[0]["disabled"] is False


def test_resolve_proposal_transitions(server):
    log_scored(server, [0.9])
    server.register_rule("demo", hallucination_rule())
    proposal = server.monitor.tick("demo", "high-hallucination", now=NOW)
    resolved = server.resolve_proposal(proposal["proposal_id"], "accepted", note="shipped fix")
    assert resolved["proposal"]["status"] == "accepted"
    assert resolved["proposal"]["resolution_note"] == "shipped fix"
    with pytest.raises(IllegalTransition):
        server.resolve_proposal(proposal["proposal_id"], "rejected")
    with pytest.raises(UnknownProposal):
        server.resolve_proposal("prop-nope", "accepted")


def test_resolution_visible_in_storage_scan(server):
    log_scored(server, [0.9])
    server.register_rule("demo", hallucination_rule())
    proposal = server.monitor.tick("demo", "high-hallucination", now=NOW)
    server.resolve_proposal(proposal["proposal_id"], "rejected", note="noise")
    events = [
        (r.payload["event"], r.payload["proposal"]["status"])
        for r in server.store.scan("demo", kind="proposal_event")
    ]
    assert events == [("created", "open"), ("resolved", "rejected")]


def test_firing_state_survives_restart(tmp_path):
    from conftest import new_server

    server = new_server(tmp_path / "data")
    log_scored(server, [0.9, 0.9])
    server.register_rule("demo", hallucination_rule())
    assert server.monitor.tick("demo", "high-hallucination", now=NOW) is not None
    server.close()

    revived = new_server(tmp_path / "data")
    # cooldown derives from the persisted proposal record
    assert revived.monitor.tick("demo", "high-hallucination", now=NOW + 1000) is None
    assert revived.monitor.tick("demo", "high-hallucination", now=NOW + 11 * 60 * 1000) is not None
    revived.close()


def test_offline_replay_produces_identical_firings(server):
    """Live scheduler run over a recorded window, then an offline replay
    over the same committed data: identical firings (ids + timestamps)."""
    for i in range(60):
        score = 0.9 if (i // 10) % 2 == 0 else 0.1  # alternating hot/cold stretches
        server.log_trace(
            "demo",
            make_trace_record(start_time=NOW + i * 60_000, scores={"hallucination": score}),
        )
    server.register_rule(
        "demo",
        hallucination_rule(window_ms=10 * 60_000, cooldown_ms=15 * 60_000),
    )
    tick_times = [NOW + i * 5 * 60_000 for i in range(14)]

    def run(label):
        server.monitor.reset_firing_state()
        firings = []
        for t in tick_times:
            proposal = server.monitor.tick("demo", "high-hallucination", now=t)
            if proposal is not None:
                firings.append((proposal["subject"], t, tuple(proposal["evidence"])))
        return firings

    live = run("live")
    replayed = run("replay")
    assert live == replayed
    assert live, "fixture should actually fire"
    # no flapping: at most ceil(observation_period / cooldown) firings
    period = tick_times[-1] - tick_times[0]
    assert len(live) <= math.ceil(period / (15 * 60_000)) + 1


def test_scheduler_ticks_rules(server):
    log_scored(server, [0.9, 0.9], base=int(time.time() * 1000) - 1000)
    server.register_rule("demo", hallucination_rule(cooldown_ms=0))
    scheduler = MonitorScheduler(server.monitor, interval_ms=20)
    scheduler.start()
    try:
        deadline = time.time() + 3
        while time.time() < deadline:
            if server.list_proposals()["proposals"]:
                break
            time.sleep(0.02)
        assert server.list_proposals()["proposals"]
    finally:
        scheduler.stop()


def test_scheduler_zero_rules_idles(server):
    scheduler = MonitorScheduler(server.monitor, interval_ms=10)
    scheduler.start()
    time.sleep(0.05)
    scheduler.stop()
    assert server.list_proposals()["proposals"] == []
