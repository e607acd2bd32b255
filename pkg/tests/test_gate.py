from __future__ import annotations

import random

import pytest

from aide.errors import EmptyRun, EmptyWindow, UnknownRun
from aide.gate import GateConfig, sample_std

from conftest import make_trace_record


def log_run(server, run_id, relevance_scores, project="demo", base_time=1_000_000):
    for i, score in enumerate(relevance_scores):
        server.log_trace(
            project,
            make_trace_record(
                start_time=base_time + i,
                scores={"relevance": score},
                tags=[f"ci-run:{run_id}"],
            ),
        )


def gate_cfg(**kw):
    kw.setdefault("metric_name", "relevance")
    return kw


def test_summarize_run_mean(server):
    log_run(server, "r1", [0.8, 0.8, 0.9, 0.9])
    summary = server.summarize_run("demo", "r1")["summary"]
    assert summary["metrics"]["relevance"] == pytest.approx(0.85)
    assert summary["trace_count"] == 4


def test_summarize_single_trace_run(server):
    log_run(server, "r1", [0.77])
    summary = server.summarize_run("demo", "r1")["summary"]
    assert summary["metrics"]["relevance"] == pytest.approx(0.77)


def test_summarize_empty_run(server):
    with pytest.raises(EmptyRun):
        server.summarize_run("demo", "nope")


def test_summary_matches_fold_oracle(server):
    rng = random.Random(5)
    scores = [round(rng.random(), 3) for _ in range(25)]
    log_run(server, "r1", scores)
    summary = server.summarize_run("demo", "r1")["summary"]
    assert summary["metrics"]["relevance"] == pytest.approx(sum(scores) / len(scores))


def test_resummarize_is_idempotent_when_unchanged(server):
    log_run(server, "r1", [0.5, 0.7])
    first = server.summarize_run("demo", "r1")["summary"]
    second = server.summarize_run("demo", "r1")["summary"]
    assert first == second
    records = [
        r for r in server.store.scan("demo", kind="gate_result")
        if r.payload.get("result") == "run_summary"
    ]
    assert len(records) == 1


def _ten_baseline_runs(server, mean=0.90):
    for i in range(10):
        log_run(server, f"base-{i}", [mean] * 4)
        server.summarize_run("demo", f"base-{i}")


def test_ten_percent_drop_fails_gate(server):
    _ten_baseline_runs(server, 0.90)
    log_run(server, "ci-17", [0.80] * 4)
    verdict = server.evaluate_gate("demo", "ci-17", [gate_cfg()])["verdict"]
    assert verdict["pass"] is False
    detail = verdict["details"][0]
    assert detail["rule_triggered"] == "relative_drop"
    assert detail["baseline_mean"] == pytest.approx(0.90)
    assert detail["current_mean"] == pytest.approx(0.80)
    assert detail["relative_change"] == pytest.approx(-0.1111, abs=1e-3)


def test_small_drop_passes(server):
    _ten_baseline_runs(server, 0.90)
    log_run(server, "ci-18", [0.85] * 4)
    verdict = server.evaluate_gate(
        "demo", "ci-18", [gate_cfg(relative_drop_threshold=0.10)]
    )["verdict"]
    assert verdict["pass"] is True
    assert verdict["details"][0]["rule_triggered"] == "none"


def test_current_equal_to_baseline_passes(server):
    _ten_baseline_runs(server, 0.90)
    log_run(server, "ci-19", [0.90] * 4)
    verdict = server.evaluate_gate("demo", "ci-19", [gate_cfg()])["verdict"]
    assert verdict["pass"] is True
    assert verdict["details"][0]["rule_triggered"] == "none"


def test_insufficient_baseline_passes_flagged(server):
    for i in range(2):
        log_run(server, f"base-{i}", [0.9] * 3)
        server.summarize_run("demo", f"base-{i}")
    log_run(server, "new", [0.5] * 3)
    verdict = server.evaluate_gate("demo", "new", [gate_cfg(min_baseline_runs=3)])["verdict"]
    assert verdict["pass"] is True
    assert verdict["details"][0]["rule_triggered"] == "insufficient_data_pass"


def test_sigma_band_triggers_on_variance(server):
    # baseline with real variance: std > 0 enables the band
    means = [0.80, 0.82, 0.84, 0.80, 0.82, 0.84, 0.80, 0.82, 0.84, 0.82]
    for i, m in enumerate(means):
        log_run(server, f"base-{i}", [m] * 2)
        server.summarize_run("demo", f"base-{i}")
    std = sample_std(means)
    baseline_mean = sum(means) / len(means)
    # pick a current value inside the 10% drop rule but outside 2 sigma
    current = baseline_mean - 3 * std
    assert (baseline_mean - current) / baseline_mean < 0.10
    log_run(server, "new", [round(current, 6)] * 2)
    verdict = server.evaluate_gate("demo", "new", [gate_cfg(k_sigma=2.0)])["verdict"]
    assert verdict["pass"] is False
    assert verdict["details"][0]["rule_triggered"] == "sigma_band"


def test_zero_std_baseline_disables_sigma_band(server):
    _ten_baseline_runs(server, 0.90)
    log_run(server, "new", [0.88] * 4)
    verdict = server.evaluate_gate("demo", "new", [gate_cfg(k_sigma=2.0)])["verdict"]
    assert abs(verdict["details"][0]["baseline_std"]) < 1e-9
    assert verdict["pass"] is True


def test_baseline_excludes_evaluated_run(server):
    # current run is dreadful; if it leaked into its own baseline the
    # baseline mean would drop and the gate would wrongly pass
    _ten_baseline_runs(server, 0.90)
    log_run(server, "new", [0.10] * 4)
    verdict = server.evaluate_gate("demo", "new", [gate_cfg()])["verdict"]
    assert verdict["details"][0]["baseline_mean"] == pytest.approx(0.90)
    assert verdict["pass"] is False


def test_baseline_window_takes_most_recent(server):
    for i, m in enumerate([0.5] * 5 + [0.9] * 10):
        log_run(server, f"base-{i}", [m] * 2)
        server.summarize_run("demo", f"base-{i}")
    log_run(server, "new", [0.85] * 2)
    verdict = server.evaluate_gate("demo", "new", [gate_cfg(baseline_window=10)])["verdict"]
    # only the ten most recent (all 0.9) form the baseline
    assert verdict["details"][0]["baseline_mean"] == pytest.approx(0.90)


def test_determinism_same_state_same_verdict(server):
    _ten_baseline_runs(server, 0.90)
    log_run(server, "new", [0.8] * 4)
    v1 = server.evaluate_gate("demo", "new", [gate_cfg()])["verdict"]
    v2 = server.evaluate_gate("demo", "new", [gate_cfg()])["verdict"]
    assert v1 == v2


def test_monotone_sensitivity(server):
    # lowering the drop threshold never flips a fail into a pass
    _ten_baseline_runs(server, 0.90)
    log_run(server, "new", [0.80] * 4)
    failed_at = None
    for threshold in (0.20, 0.15, 0.12, 0.111, 0.10, 0.05, 0.01):
        verdict = server.evaluate_gate(
            "demo", "new", [gate_cfg(relative_drop_threshold=threshold)]
        )["verdict"]
        if not verdict["pass"]:
            failed_at = threshold
        elif failed_at is not None:
            pytest.fail(f"pass at {threshold} after fail at {failed_at}")


def test_gate_on_unsummarized_run_auto_summarizes(server):
    _ten_baseline_runs(server)
    log_run(server, "fresh", [0.9] * 2)
    verdict = server.evaluate_gate("demo", "fresh", [gate_cfg()])["verdict"]
    assert verdict["pass"] is True


def test_unknown_run(server):
    with pytest.raises((UnknownRun, EmptyRun)):
        server.gate.evaluate_gate("demo", "ghost", [GateConfig("relevance")])


def test_lower_is_better_direction(server):
    for i in range(5):
        log_run(server, f"b{i}", [0.2] * 2)
        server.summarize_run("demo", f"b{i}")
    log_run(server, "worse", [0.3] * 2)  # +50% on a lower-is-better metric
    verdict = server.evaluate_gate(
        "demo", "worse", [gate_cfg(direction="lower_is_better", relative_drop_threshold=0.10)]
    )["verdict"]
    assert verdict["pass"] is False
    assert verdict["details"][0]["rule_triggered"] == "relative_drop"


# -- drift ---------------------------------------------------------------------


def test_drift_identical_windows(server):
    for i in range(5):
        server.log_trace("demo", make_trace_record(start_time=1_000 + i, scores={"q": 0.5}))
        server.log_trace("demo", make_trace_record(start_time=2_000 + i, scores={"q": 0.5}))
    report = server.drift_check("demo", "q", [1_000, 1_500], [2_000, 2_500], 15.0)["report"]
    assert report["change_pct"] == 0.0
    assert report["triggered"] is False


def test_drift_twenty_percent_triggers_fifteen(server):
    for i in range(4):
        server.log_trace("demo", make_trace_record(start_time=1_000 + i, scores={"q": 0.5}))
    for i in range(4):
        server.log_trace("demo", make_trace_record(start_time=2_000 + i, scores={"q": 0.6}))
    report = server.drift_check("demo", "q", [1_000, 1_500], [2_000, 2_500], 15.0)["report"]
    assert report["change_pct"] == pytest.approx(20.0)
    assert report["triggered"] is True


def test_drift_empty_window(server):
    server.log_trace("demo", make_trace_record(start_time=1_000, scores={"q": 0.5}))
    with pytest.raises(EmptyWindow):
        server.drift_check("demo", "q", [1_000, 1_500], [9_000, 9_500], 10.0)


def test_drift_matches_fold_oracle(server):
    rng = random.Random(11)
    a_scores = [round(rng.random(), 3) for _ in range(30)]
    b_scores = [round(rng.random(), 3) for _ in range(30)]
    for i, s in enumerate(a_scores):
        server.log_trace("demo", make_trace_record(start_time=10_000 + i, scores={"q": s}))
    for i, s in enumerate(b_scores):
        server.log_trace("demo", make_trace_record(start_time=20_000 + i, scores={"q": s}))
    report = server.drift_check("demo", "q", [10_000, 11_000], [20_000, 21_000], 5.0)["report"]
    mean_a = sum(a_scores) / len(a_scores)
    mean_b = sum(b_scores) / len(b_scores)
    assert report["mean_a"] == pytest.approx(mean_a)
    assert report["mean_b"] == pytest.approx(mean_b)
    assert report["change_pct"] == pytest.approx((mean_b - mean_a) / mean_a * 100)
