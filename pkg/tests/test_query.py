from __future__ import annotations

import math
import random

import pytest

from aide.errors import InvalidRange, ValidationError, WindowTooWide
from aide.model import Predicate, validate_trace

from conftest import make_trace_record


# -- independent fold oracle ---------------------------------------------------

def oracle_filter(records, predicates=(), time_range=None):
    """Ten-line reference filter over raw wire records."""
    out = []
    for rec, seq in records:
        t = validate_trace(rec)
        if time_range and not (time_range[0] <= t.start_time < time_range[1]):
            continue
        if all(p.matches(t) for p in predicates):
            out.append((rec, seq))
    return out


def oracle_aggregate(records, lo, hi, width):
    """Brute-force recompute of one bucketed report from raw records."""
    n_buckets = math.ceil((hi - lo) / width)
    buckets = [[] for _ in range(n_buckets)]
    for rec, _ in records:
        if lo <= rec["start_time"] < hi:
            buckets[(rec["start_time"] - lo) // width].append(rec)
    report = []
    for b, members in enumerate(buckets):
        latencies = sorted(r["end_time"] - r["start_time"] for r in members)

        def rank(p):
            if not latencies:
                return None
            return latencies[max(1, math.ceil(p / 100 * len(latencies))) - 1]

        score_keys = sorted({k for r in members for k in r["scores"]})
        report.append(
            {
                "bucket_start": lo + b * width,
                "trace_count": len(members),
                "prompt_sum": sum(r["token_usage"]["prompt_tokens"] for r in members),
                "latency_mean": (sum(latencies) / len(latencies)) if latencies else None,
                "p50": rank(50),
                "p95": rank(95),
                "scores": {
                    k: sum(r["scores"][k] for r in members if k in r["scores"])
                    / sum(1 for r in members if k in r["scores"])
                    for k in score_keys
                },
                "negative": sum(1 for r in members if r["feedback"] == -1),
            }
        )
    return report


def random_fixture(rng, n, base=1_000_000):
    records = []
    for i in range(n):
        start = base + rng.randrange(0, 60_000)
        scores = {}
        if rng.random() < 0.8:
            scores["hallucination"] = round(rng.random(), 3)
        if rng.random() < 0.5:
            scores["relevance"] = round(rng.random(), 3)
        records.append(
            make_trace_record(
                trace_id=f"fx{i:05d}",
                start_time=start,
                latency_ms=rng.randrange(0, 5000),
                prompt_tokens=rng.randrange(0, 500),
                completion_tokens=rng.randrange(0, 500),
                scores=scores,
                feedback=rng.choice([None, None, -1, 0, 1]),
                tags=rng.choice([[], ["prod"], ["prod", "beta"]]),
            )
        )
    return records


@pytest.fixture
def loaded(server):
    rng = random.Random(1234)
    records = random_fixture(rng, 200)
    committed = []
    for rec in records:
        result = server.log_trace("demo", rec)
        committed.append((rec, result["seq"]))
    return server, committed


def test_search_matches_fold_oracle(loaded):
    server, committed = loaded
    predicates = (Predicate("scores.hallucination", "ge", 0.6),)
    expected = oracle_filter(committed, predicates)
    expected_ids = {rec["trace_id"] for rec, _ in expected}

    got = server.search_traces(
        {
            "project_id": "demo",
            "predicates": [{"field": "scores.hallucination", "op": "ge", "value": 0.6}],
            "limit": 1000,
        }
    )
    got_ids = {t["trace_id"] for t in got["traces"]}
    assert got_ids == expected_ids
    # ordering: start_time desc, ties by seq desc
    sorted_expected = sorted(expected, key=lambda p: (p[0]["start_time"], p[1]), reverse=True)
    assert [t["trace_id"] for t in got["traces"]] == [r["trace_id"] for r, _ in sorted_expected]


def test_most_recent_qualifying_traces_limit_5(server):
    # ten traces with known scores; the five most recent qualifying come back
    scores = [0.9, 0.2, 0.7, 0.65, 0.1, 0.8, 0.95, 0.3, 0.61, 0.99]
    for i, sc in enumerate(scores):
        server.log_trace(
            "demo",
            make_trace_record(trace_id=f"t{i}", start_time=1_000_000 + i, scores={"hallucination": sc}),
        )
    got = server.search_traces(
        {
            "project_id": "demo",
            "predicates": [{"field": "scores.hallucination", "op": "ge", "value": 0.6}],
            "limit": 5,
        }
    )
    assert [t["trace_id"] for t in got["traces"]] == ["t9", "t8", "t6", "t5", "t3"]


def test_search_empty_project(server):
    got = server.search_traces({"project_id": "empty", "predicates": []})
    assert got == {"traces": [], "next_cursor": None}


def test_negative_feedback_last_hour_query(server):
    now = 10_000_000
    server.log_trace("demo", make_trace_record(trace_id="old", start_time=now - 7_200_000, feedback=-1))
    server.log_trace("demo", make_trace_record(trace_id="sad", start_time=now - 60_000, feedback=-1))
    server.log_trace("demo", make_trace_record(trace_id="ok", start_time=now - 30_000, feedback=1))
    got = server.search_traces(
        {
            "project_id": "demo",
            "predicates": [{"field": "feedback", "op": "eq", "value": -1}],
            "time_range": [now - 3_600_000, now],
        }
    )
    assert [t["trace_id"] for t in got["traces"]] == ["sad"]


def test_pagination_union_equals_unpaged(loaded):
    server, _ = loaded
    unpaged = server.search_traces({"project_id": "demo", "limit": 1000})
    pages, cursor = [], None
    while True:
        page = server.search_traces({"project_id": "demo", "limit": 17, "cursor": cursor})
        pages.extend(t["trace_id"] for t in page["traces"])
        cursor = page["next_cursor"]
        if cursor is None:
            break
    assert pages == [t["trace_id"] for t in unpaged["traces"]]
    assert len(pages) == len(set(pages))


def test_count_traces(loaded):
    server, committed = loaded
    assert server.count_traces("demo")["count"] == len(committed)
    lo = 1_000_000 + 10_000
    hi = 1_000_000 + 20_000
    expected = len(oracle_filter(committed, time_range=(lo, hi)))
    assert server.count_traces("demo", [lo, hi])["count"] == expected
    assert server.count_traces("demo", [0, 1])["count"] == 0
    assert server.count_traces("fresh")["count"] == 0


def test_latest_trace_tie_broken_by_seq(server):
    server.log_trace("demo", make_trace_record(trace_id="first", start_time=5000))
    server.log_trace("demo", make_trace_record(trace_id="second", start_time=5000))
    got = server.latest_trace("demo")
    assert got["trace"]["trace_id"] == "second"


def test_latest_trace_empty_and_predicate(server):
    assert server.latest_trace("demo") == {"trace": None, "seq": None}
    server.log_trace("demo", make_trace_record(trace_id="low", start_time=2000, scores={"hallucination": 0.2}))
    server.log_trace("demo", make_trace_record(trace_id="high", start_time=1000, scores={"hallucination": 0.9}))
    got = server.latest_trace(
        "demo", [{"field": "scores.hallucination", "op": "ge", "value": 0.6}]
    )
    assert got["trace"]["trace_id"] == "high"


def test_aggregate_matches_brute_force(loaded):
    server, committed = loaded
    lo, hi, width = 1_000_000, 1_060_000, 10_000
    report = server.aggregate_metrics("demo", [lo, hi], width)
    expected = oracle_aggregate(committed, lo, hi, width)
    assert len(report["buckets"]) == len(expected)
    for got, want in zip(report["buckets"], expected):
        assert got["bucket_start"] == want["bucket_start"]
        assert got["trace_count"] == want["trace_count"]
        assert got["token_usage"]["prompt_tokens"]["sum"] == want["prompt_sum"]
        assert got["latency_ms"]["mean"] == pytest.approx(want["latency_mean"]) if want["latency_mean"] is not None else got["latency_ms"]["mean"] is None
        assert got["latency_ms"]["p50"] == want["p50"]
        assert got["latency_ms"]["p95"] == want["p95"]
        assert got["feedback"]["negative"] == want["negative"]
        assert set(got["scores"]) == set(want["scores"])
        for k in want["scores"]:
            assert got["scores"][k] == pytest.approx(want["scores"][k])


def test_single_trace_percentiles(server):
    server.log_trace("demo", make_trace_record(start_time=1_000_000, latency_ms=900))
    report = server.aggregate_metrics("demo", [1_000_000, 1_001_000], 1000)
    bucket = report["buckets"][0]
    assert bucket["latency_ms"]["p50"] == 900
    assert bucket["latency_ms"]["p95"] == 900
    assert bucket["latency_ms"]["mean"] == 900


def test_empty_bucket_reports_absent_means_not_zero(server):
    server.log_trace("demo", make_trace_record(start_time=1_000_000))
    report = server.aggregate_metrics("demo", [1_000_000, 1_003_000], 1000)
    empty = report["buckets"][2]
    assert empty["trace_count"] == 0
    assert empty["latency_ms"]["mean"] is None
    assert empty["token_usage"]["prompt_tokens"]["mean"] is None
    assert empty["token_usage"]["prompt_tokens"]["sum"] == 0
    assert empty["scores"] == {}


def test_aggregate_window_limits(server):
    with pytest.raises(WindowTooWide):
        server.aggregate_metrics("demo", [0, 20_000_000], 1000)
    with pytest.raises(ValidationError):
        server.aggregate_metrics("demo", [0, 10_000], 500)
    with pytest.raises(InvalidRange):
        server.aggregate_metrics("demo", [10, 5], 1000)


def test_monotone_consistency_closed_range(server):
    lo, hi = 1_000_000, 1_060_000
    for i in range(20):
        server.log_trace("demo", make_trace_record(start_time=lo + i * 1000, scores={"q": 0.8}))
    query = {
        "project_id": "demo",
        "predicates": [{"field": "scores.q", "op": "ge", "value": 0.5}],
        "time_range": [lo, hi],
        "limit": 1000,
    }
    before = {t["trace_id"] for t in server.search_traces(query)["traces"]}
    server.log_trace("demo", make_trace_record(start_time=lo + 30_000, scores={"q": 0.9}))
    after = {t["trace_id"] for t in server.search_traces(query)["traces"]}
    assert before <= after


def test_order_by_score_with_missing_values_sorts_last(server):
    server.log_trace("demo", make_trace_record(trace_id="none1"))
    server.log_trace("demo", make_trace_record(trace_id="mid", scores={"q": 0.5}))
    server.log_trace("demo", make_trace_record(trace_id="top", scores={"q": 0.9}))
    got = server.search_traces(
        {"project_id": "demo", "order_by": ["scores.q", "desc"], "limit": 10}
    )
    assert [t["trace_id"] for t in got["traces"]] == ["top", "mid", "none1"]


def test_index_consistency_with_full_scan(loaded):
    server, _ = loaded
    # every index lookup result is reachable by a full record scan
    scan_ids = {r.payload["trace"]["trace_id"] for r in server.store.scan("demo", kind="trace")}
    window = server.index.traces_in_window("demo", 0, 10**15)
    assert {t.trace_id for t, _ in window} <= scan_ids
    by_score = server.index.with_score_key("demo", "hallucination")
    assert {t.trace_id for t in by_score} <= scan_ids
    assert len(window) == len(scan_ids)
