from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from aide.errors import UnknownField, ValidationError
from aide.model import (
    FilterQuery,
    Predicate,
    Trace,
    validate_trace,
)
from aide.wire import canonical_json, decode_json

from conftest import make_span, make_trace_record


def test_minimal_trace_accepted():
    t = validate_trace(make_trace_record(latency_ms=900))
    assert t.latency_ms == 900
    assert t.token_usage.prompt_tokens == 10


def test_end_before_start_rejected():
    record = make_trace_record(start_time=2000, end_time=1000)
    record["end_time"] = 1000
    record["start_time"] = 2000
    with pytest.raises(ValidationError) as exc:
        validate_trace(record)
    assert exc.value.field == "end_time"


def test_zero_spans_equal_times_is_legal_with_zero_latency():
    t = validate_trace(make_trace_record(start_time=5000, end_time=5000, latency_ms=0))
    assert t.latency_ms == 0
    assert t.spans == ()


def test_dangling_parent_span_rejected():
    record = make_trace_record(spans=[make_span("a", parent_span="missing")])
    with pytest.raises(ValidationError) as exc:
        validate_trace(record)
    assert "parent_span" in exc.value.field


def test_span_cycle_rejected():
    spans = [make_span("a", parent_span="b"), make_span("b", parent_span="a")]
    with pytest.raises(ValidationError) as exc:
        validate_trace(make_trace_record(spans=spans))
    assert "parent_span" in exc.value.field


def test_duplicate_span_ids_rejected():
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(spans=[make_span("a"), make_span("a")]))


def test_span_clock_skew_tolerated():
    # Span intervals need not be contained in the trace interval.
    spans = [make_span("a", start_time=10, end_time=20)]
    t = validate_trace(make_trace_record(start_time=5000, end_time=6000, spans=spans))
    assert t.spans[0].start_time == 10


def test_bad_id_characters_rejected():
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(trace_id="no spaces allowed"))
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(project_id="x" * 129))


def test_score_out_of_range_rejected():
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(scores={"quality": 1.5}))
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(scores={"quality": -0.1}))


def test_feedback_tristate():
    for ok in (-1, 0, 1, None):
        validate_trace(make_trace_record(feedback=ok))
    with pytest.raises(ValidationError):
        validate_trace(make_trace_record(feedback=2))


def test_oversized_payload_rejected_not_truncated():
    big = "x" * ((1 << 20) + 1)
    with pytest.raises(ValidationError) as exc:
        validate_trace(make_trace_record(output=big))
    assert exc.value.field == "output"


def test_missing_trace_id_gets_assigned():
    record = make_trace_record()
    del record["trace_id"]
    t = validate_trace(record, project_id="demo")
    assert len(t.trace_id) == 32


def test_score_append_only():
    t = validate_trace(make_trace_record(scores={"a": 0.5}))
    t2 = t.with_score("b", 0.25)
    assert t2.scores == {"a": 0.5, "b": 0.25}
    with pytest.raises(ValidationError):
        t2.with_score("a", 0.9)
    # original untouched
    assert t.scores == {"a": 0.5}


# -- wire round-trip ---------------------------------------------------------


def test_trace_wire_round_trip_is_byte_identical():
    record = make_trace_record(
        scores={"hallucination": 0.7, "accuracy": 0.25},
        tags=["prod", "ci-run:17"],
        feedback=-1,
        spans=[make_span("a"), make_span("b", parent_span="a", error="boom")],
        prompt_ref={"name": "qa-system", "version": 2},
    )
    t = validate_trace(record)
    encoded = canonical_json(t.to_wire())
    decoded = Trace.from_wire(decode_json(encoded))
    assert canonical_json(decoded.to_wire()) == encoded


_ids = st.text(alphabet="ABCdef123._-", min_size=1, max_size=12)


@given(
    trace_id=_ids,
    start=st.integers(min_value=0, max_value=10**12),
    latency=st.integers(min_value=0, max_value=10**6),
    scores=st.dictionaries(_ids, st.floats(min_value=0, max_value=1, allow_nan=False), max_size=4),
    tags=st.lists(st.text(min_size=1, max_size=8), max_size=4),
    feedback=st.sampled_from([-1, 0, 1, None]),
)
def test_wire_round_trip_property(trace_id, start, latency, scores, tags, feedback):
    record = make_trace_record(
        trace_id=trace_id,
        start_time=start,
        end_time=start + latency,
        scores=scores,
        tags=tags,
        feedback=feedback,
    )
    t = validate_trace(record)
    encoded = canonical_json(t.to_wire())
    again = canonical_json(Trace.from_wire(decode_json(encoded)).to_wire())
    assert again == encoded


# -- filter queries ----------------------------------------------------------


def test_unknown_field_is_an_error_not_ignored():
    with pytest.raises(UnknownField):
        Predicate("no_such_field", "eq", 1)
    with pytest.raises(UnknownField):
        FilterQuery("demo", order_by=("bogus", "asc"))


def test_predicate_matching():
    t = validate_trace(
        make_trace_record(
            scores={"hallucination": 0.7},
            tags=["prod"],
            feedback=-1,
            latency_ms=900,
        )
    )
    assert Predicate("scores.hallucination", "ge", 0.6).matches(t)
    assert not Predicate("scores.hallucination", "gt", 0.7).matches(t)
    assert Predicate("tags", "contains", "prod").matches(t)
    assert not Predicate("tags", "contains", "staging").matches(t)
    assert Predicate("feedback", "eq", -1).matches(t)
    assert Predicate("latency_ms", "le", 900).matches(t)
    assert Predicate("error_present", "eq", False).matches(t)
    # missing score: comparable ops never match, exists distinguishes
    assert not Predicate("scores.missing", "ge", 0.0).matches(t)
    assert not Predicate("scores.missing", "exists").matches(t)
    assert Predicate("scores.missing", "exists", False).matches(t)


def test_filter_query_limits_and_ranges():
    with pytest.raises(ValidationError):
        FilterQuery("demo", limit=0)
    with pytest.raises(ValidationError):
        FilterQuery("demo", limit=1001)
    with pytest.raises(Exception):
        FilterQuery("demo", time_range=(10, 5))
    q = FilterQuery("demo")
    assert q.limit == 50
    assert q.order_by == ("start_time", "desc")


def test_filter_query_conjunction_and_time_range():
    q = FilterQuery(
        "demo",
        predicates=(Predicate("feedback", "eq", -1),),
        time_range=(1_000_000, 1_000_001),
    )
    hit = validate_trace(make_trace_record(feedback=-1, start_time=1_000_000))
    miss_time = validate_trace(make_trace_record(feedback=-1, start_time=1_000_001))
    miss_pred = validate_trace(make_trace_record(feedback=1, start_time=1_000_000))
    assert q.matches(hit)
    assert not q.matches(miss_time)
    assert not q.matches(miss_pred)
