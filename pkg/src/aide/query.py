"""Structured queries over committed traces: search, count, latest, and
time-bucketed aggregate metrics.

The in-memory indexes here (by trace id, by start time, by prompt ref, by
score key) are an optimization over the record log, never a source of
truth — every result is recomputable by folding the stored trace records,
and the test suite holds the engine to exactly that.

Percentiles are nearest-rank (no interpolation): the p-th percentile of n
sorted values is the value at rank ceil(p/100 * n).
"""

from __future__ import annotations

import base64
import math
from bisect import bisect_left, insort
from typing import Iterable

from .errors import InvalidRange, UnknownProject, ValidationError, WindowTooWide
from .model import FilterQuery, Predicate, Trace, trace_field
from .storage import LogRecord
from .wire import canonical_json, decode_json

MIN_BUCKET_WIDTH_MS = 1000
MAX_BUCKETS = 10_000


class _ProjectTraces:
    __slots__ = ("by_id", "seq_of", "entries", "by_start", "by_prompt", "by_score", "hashes")

    def __init__(self) -> None:
        self.by_id: dict[str, Trace] = {}
        self.seq_of: dict[str, int] = {}
        self.entries: list[str] = []  # trace ids in commit order
        self.by_start: list[tuple[int, int, str]] = []  # (start_time, seq, trace_id)
        self.by_prompt: dict[tuple[str, int], list[str]] = {}
        self.by_score: dict[str, list[str]] = {}
        self.hashes: dict[str, str] = {}


class TraceIndex:
    """Folds trace and score_append records into queryable state."""

    def __init__(self) -> None:
        self._projects: dict[str, _ProjectTraces] = {}

    def apply(self, record: LogRecord) -> None:
        if record.kind == "trace":
            trace = Trace.from_wire(record.payload["trace"])
            state = self._projects.setdefault(trace.project_id, _ProjectTraces())
            state.by_id[trace.trace_id] = trace
            state.seq_of[trace.trace_id] = record.seq
            state.entries.append(trace.trace_id)
            insort(state.by_start, (trace.start_time, record.seq, trace.trace_id))
            if trace.prompt_ref:
                state.by_prompt.setdefault(trace.prompt_ref, []).append(trace.trace_id)
            for metric in trace.scores:
                state.by_score.setdefault(metric, []).append(trace.trace_id)
            state.hashes[trace.trace_id] = record.payload.get("content_hash", "")
        elif record.kind == "score_append":
            p = record.payload
            state = self._projects.get(p["project_id"])
            if state is None or p["trace_id"] not in state.by_id:
                return
            trace = state.by_id[p["trace_id"]]
            if p["name"] in trace.scores:
                return  # append-only: replays of dup keys are ignored
            state.by_id[p["trace_id"]] = trace.with_score(p["name"], p["value"])
            state.by_score.setdefault(p["name"], []).append(p["trace_id"])

    # -- lookups used by other services ---------------------------------------

    def known_project(self, project_id: str) -> bool:
        return project_id in self._projects

    def get(self, project_id: str, trace_id: str) -> tuple[Trace, int] | None:
        state = self._projects.get(project_id)
        if state is None or trace_id not in state.by_id:
            return None
        return state.by_id[trace_id], state.seq_of[trace_id]

    def content_hash(self, project_id: str, trace_id: str) -> str | None:
        state = self._projects.get(project_id)
        return state.hashes.get(trace_id) if state else None

    def traces_in_window(self, project_id: str, lo: int, hi: int) -> list[tuple[Trace, int]]:
        """Traces with start_time in [lo, hi), via the start-time index."""
        state = self._projects.get(project_id)
        if state is None:
            return []
        snapshot = list(state.by_start)
        i = bisect_left(snapshot, (lo,))
        j = bisect_left(snapshot, (hi,))
        return [(state.by_id[tid], seq) for _, seq, tid in snapshot[i:j]]

    def all_traces(self, project_id: str) -> list[tuple[Trace, int]]:
        state = self._projects.get(project_id)
        if state is None:
            return []
        return [(state.by_id[tid], state.seq_of[tid]) for tid in list(state.entries)]

    def by_prompt(self, project_id: str, prompt_name: str, version: int) -> list[Trace]:
        state = self._projects.get(project_id)
        if state is None:
            return []
        return [state.by_id[tid] for tid in state.by_prompt.get((prompt_name, version), ())]

    def with_score_key(self, project_id: str, metric: str) -> list[Trace]:
        state = self._projects.get(project_id)
        if state is None:
            return []
        return [state.by_id[tid] for tid in state.by_score.get(metric, ())]


def nearest_rank(sorted_values: list, pct: float):
    """Nearest-rank percentile of an already-sorted nonempty list."""
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def _mean(values: Iterable[float]) -> float | None:
    values = list(values)
    return sum(values) / len(values) if values else None


def _encode_cursor(order_field: str, direction: str, seq: int) -> str:
    raw = canonical_json({"f": order_field, "d": direction, "s": seq})
    return base64.urlsafe_b64encode(raw).decode("ascii").rstrip("=")


def _decode_cursor(cursor: str, order_field: str, direction: str) -> int:
    try:
        padded = cursor + "=" * (-len(cursor) % 4)
        raw = decode_json(base64.urlsafe_b64decode(padded.encode("ascii")))
        if raw["f"] != order_field or raw["d"] != direction:
            raise ValueError("cursor ordering mismatch")
        return int(raw["s"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError("cursor", f"invalid cursor: {exc}") from exc


class QueryEngine:
    def __init__(self, index: TraceIndex, *, auto_create_projects: bool = True) -> None:
        self._index = index
        self._auto = auto_create_projects

    def _check_project(self, project_id: str) -> None:
        if not self._auto and not self._index.known_project(project_id):
            raise UnknownProject(f"unknown project {project_id!r}")

    def _candidates(self, query: FilterQuery) -> list[tuple[Trace, int]]:
        if query.time_range is not None:
            lo, hi = query.time_range
            pool = self._index.traces_in_window(query.project_id, lo, hi)
        else:
            pool = self._index.all_traces(query.project_id)
        return [(t, seq) for t, seq in pool if all(p.matches(t) for p in query.predicates)]

    def _ordered(self, matches: list[tuple[Trace, int]], order_by: tuple[str, str]):
        order_field, direction = order_by
        reverse = direction == "desc"
        present = [(t, seq) for t, seq in matches if trace_field(t, order_field) is not None]
        missing = [(t, seq) for t, seq in matches if trace_field(t, order_field) is None]
        present.sort(key=lambda pair: (trace_field(pair[0], order_field), pair[1]), reverse=reverse)
        missing.sort(key=lambda pair: pair[1], reverse=reverse)
        return present + missing  # traces lacking the field always sort last

    def search_traces(self, query: FilterQuery) -> dict:
        """Filtered, ordered, paged search. Pagination is keyset-based: the
        cursor pins the last-returned trace, so pages never duplicate and,
        over a closed time range, never lose previously returned results."""
        self._check_project(query.project_id)
        ordered = self._ordered(self._candidates(query), query.order_by)
        if query.cursor is not None:
            after_seq = _decode_cursor(query.cursor, *query.order_by)
            pos = next((i for i, (_, seq) in enumerate(ordered) if seq == after_seq), None)
            if pos is None:
                raise ValidationError("cursor", "cursor does not reference a known trace")
            ordered = ordered[pos + 1 :]
        page = ordered[: query.limit]
        next_cursor = None
        if len(ordered) > query.limit and page:
            next_cursor = _encode_cursor(*query.order_by, page[-1][1])
        return {
            "traces": [t.to_wire() for t, _ in page],
            "next_cursor": next_cursor,
        }

    def count_traces(self, project_id: str, time_range: tuple[int, int] | None = None) -> int:
        self._check_project(project_id)
        if time_range is not None:
            lo, hi = time_range
            if lo > hi:
                raise InvalidRange(f"invalid time range [{lo}, {hi})")
            return len(self._index.traces_in_window(project_id, lo, hi))
        return len(self._index.all_traces(project_id))

    def latest_trace(self, project_id: str, predicates: tuple[Predicate, ...] = ()) -> tuple[Trace, int] | None:
        """Max-start_time matching trace; ties broken by higher seq."""
        self._check_project(project_id)
        best: tuple[Trace, int] | None = None
        for trace, seq in self._index.all_traces(project_id):
            if not all(p.matches(trace) for p in predicates):
                continue
            if best is None or (trace.start_time, seq) > (best[0].start_time, best[1]):
                best = (trace, seq)
        return best

    def aggregate_metrics(self, project_id: str, window: tuple[int, int], bucket_width_ms: int) -> dict:
        self._check_project(project_id)
        lo, hi = window
        if not isinstance(lo, int) or not isinstance(hi, int) or lo > hi:
            raise InvalidRange(f"invalid window [{lo}, {hi})")
        if not isinstance(bucket_width_ms, int) or bucket_width_ms < MIN_BUCKET_WIDTH_MS:
            raise ValidationError("bucket_width_ms", f"must be >= {MIN_BUCKET_WIDTH_MS}")
        n_buckets = math.ceil((hi - lo) / bucket_width_ms)
        if n_buckets > MAX_BUCKETS:
            raise WindowTooWide(f"{n_buckets} buckets exceeds the {MAX_BUCKETS} bucket cap")

        in_window = self._index.traces_in_window(project_id, lo, hi)
        grouped: dict[int, list[Trace]] = {}
        for trace, _ in in_window:
            grouped.setdefault((trace.start_time - lo) // bucket_width_ms, []).append(trace)

        buckets = []
        for b in range(n_buckets):
            traces = grouped.get(b, [])
            latencies = sorted(t.latency_ms for t in traces)
            score_keys = sorted({k for t in traces for k in t.scores})
            feedbacks = [t.feedback for t in traces if t.feedback is not None]
            buckets.append(
                {
                    "bucket_start": lo + b * bucket_width_ms,
                    "trace_count": len(traces),
                    "token_usage": {
                        "prompt_tokens": {
                            "sum": sum(t.token_usage.prompt_tokens for t in traces),
                            "mean": _mean(t.token_usage.prompt_tokens for t in traces),
                        },
                        "completion_tokens": {
                            "sum": sum(t.token_usage.completion_tokens for t in traces),
                            "mean": _mean(t.token_usage.completion_tokens for t in traces),
                        },
                    },
                    "latency_ms": {
                        "mean": _mean(latencies),
                        "p50": nearest_rank(latencies, 50) if latencies else None,
                        "p95": nearest_rank(latencies, 95) if latencies else None,
                    },
                    "scores": {
                        k: _mean(t.scores[k] for t in traces if k in t.scores)
                        for k in score_keys
                    },
                    "feedback": {
                        "negative": sum(1 for f in feedbacks if f == -1),
                        "neutral": sum(1 for f in feedbacks if f == 0),
                        "positive": sum(1 for f in feedbacks if f == 1),
                    },
                }
            )
        return {
            "project_id": project_id,
            "window": [lo, hi],
            "bucket_width_ms": bucket_width_ms,
            "buckets": buckets,
        }
