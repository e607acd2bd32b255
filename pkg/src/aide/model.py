"""Domain types: traces, spans, prompts, bindings, and filter queries.

Everything here is an immutable value object, safe to share across threads.
Each type knows how to encode itself to the canonical wire dict
(``to_wire``) and to rebuild itself from one (``from_wire``); field order
in the wire dicts is fixed and is what the canonical JSON encoding
serializes.
"""

from __future__ import annotations

import math
import re
import secrets
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from .errors import InvalidRange, UnknownField, ValidationError

ID_PATTERN = re.compile(r"^[A-Za-z0-9._-]{1,128}$")
MAX_PAYLOAD_BYTES = 1 << 20  # per input/output payload, rejected (not truncated)

SPAN_KINDS = ("llm_call", "tool_call", "evaluation", "other")
FILTER_OPS = ("eq", "neq", "lt", "le", "gt", "ge", "contains", "exists")

# Field paths queryable on a trace, with the set of ops each supports.
_NUMERIC_OPS = frozenset({"eq", "neq", "lt", "le", "gt", "ge", "exists"})
_FIELD_OPS: dict[str, frozenset[str]] = {
    "name": frozenset({"eq", "neq", "contains", "exists"}),
    "tags": frozenset({"contains", "exists"}),
    "feedback": _NUMERIC_OPS,
    "prompt_ref.name": frozenset({"eq", "neq", "contains", "exists"}),
    "prompt_ref.version": _NUMERIC_OPS,
    "token_usage.prompt_tokens": _NUMERIC_OPS,
    "token_usage.completion_tokens": _NUMERIC_OPS,
    "latency_ms": _NUMERIC_OPS,
    "start_time": _NUMERIC_OPS,
    "end_time": _NUMERIC_OPS,
    "error_present": frozenset({"eq", "neq", "exists"}),
}
ORDERABLE_FIELDS = frozenset(
    {
        "name",
        "feedback",
        "prompt_ref.version",
        "token_usage.prompt_tokens",
        "token_usage.completion_tokens",
        "latency_ms",
        "start_time",
        "end_time",
    }
)


def new_id(prefix: str = "") -> str:
    suffix = secrets.token_hex(16)
    return f"{prefix}{suffix}" if prefix else suffix


def check_id(value: Any, field_name: str) -> str:
    if not isinstance(value, str) or not ID_PATTERN.match(value):
        raise ValidationError(field_name, "must be 1-128 chars of [A-Za-z0-9._-]")
    return value


def _check_ms(value: Any, field_name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(field_name, "must be integer milliseconds since epoch")
    if value < 0:
        raise ValidationError(field_name, "must be >= 0")
    return value


def _check_payload(value: Any, field_name: str) -> str:
    if value is None:
        return ""
    if not isinstance(value, str):
        raise ValidationError(field_name, "must be a UTF-8 string")
    if len(value.encode("utf-8")) > MAX_PAYLOAD_BYTES:
        raise ValidationError(field_name, f"payload exceeds {MAX_PAYLOAD_BYTES} bytes")
    return value


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_wire(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    @classmethod
    def from_wire(cls, raw: Any, field_name: str = "token_usage") -> TokenUsage:
        if raw is None:
            return cls()
        if not isinstance(raw, Mapping):
            raise ValidationError(field_name, "must be an object")
        usage = {}
        for key in ("prompt_tokens", "completion_tokens"):
            value = raw.get(key, 0)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValidationError(f"{field_name}.{key}", "must be a nonnegative integer")
            usage[key] = value
        return cls(**usage)


@dataclass(frozen=True)
class Span:
    span_id: str
    kind: str = "other"
    name: str = ""
    parent_span: str | None = None
    input: str = ""
    output: str = ""
    start_time: int = 0
    end_time: int = 0
    token_usage: TokenUsage | None = None
    error: str | None = None

    def to_wire(self) -> dict:
        return {
            "span_id": self.span_id,
            "parent_span": self.parent_span,
            "kind": self.kind,
            "name": self.name,
            "input": self.input,
            "output": self.output,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "token_usage": self.token_usage.to_wire() if self.token_usage else None,
            "error": self.error,
        }

    @classmethod
    def from_wire(cls, raw: Any, index: int) -> Span:
        where = f"spans[{index}]"
        if not isinstance(raw, Mapping):
            raise ValidationError(where, "must be an object")
        span_id = raw.get("span_id") or new_id()
        check_id(span_id, f"{where}.span_id")
        kind = raw.get("kind", "other")
        if kind not in SPAN_KINDS:
            raise ValidationError(f"{where}.kind", f"must be one of {', '.join(SPAN_KINDS)}")
        name = raw.get("name", "")
        if not isinstance(name, str):
            raise ValidationError(f"{where}.name", "must be a string")
        parent = raw.get("parent_span")
        if parent is not None:
            check_id(parent, f"{where}.parent_span")
        start = _check_ms(raw.get("start_time", 0), f"{where}.start_time")
        end = _check_ms(raw.get("end_time", start), f"{where}.end_time")
        if end < start:
            raise ValidationError(f"{where}.end_time", "end_time must be >= start_time")
        error = raw.get("error")
        if error is not None and not isinstance(error, str):
            raise ValidationError(f"{where}.error", "must be a string or null")
        usage = raw.get("token_usage")
        return cls(
            span_id=span_id,
            parent_span=parent,
            kind=kind,
            name=name,
            input=_check_payload(raw.get("input"), f"{where}.input"),
            output=_check_payload(raw.get("output"), f"{where}.output"),
            start_time=start,
            end_time=end,
            token_usage=TokenUsage.from_wire(usage, f"{where}.token_usage") if usage is not None else None,
            error=error,
        )


@dataclass(frozen=True)
class Trace:
    trace_id: str
    project_id: str
    name: str = ""
    start_time: int = 0
    end_time: int = 0
    spans: tuple[Span, ...] = ()
    prompt_ref: tuple[str, int] | None = None
    input: str = ""
    output: str = ""
    token_usage: TokenUsage = field(default_factory=TokenUsage)
    scores: Mapping[str, float] = field(default_factory=dict)
    feedback: int | None = None
    tags: frozenset[str] = frozenset()

    @property
    def latency_ms(self) -> int:
        return self.end_time - self.start_time

    @property
    def error_present(self) -> bool:
        return any(s.error is not None for s in self.spans)

    def with_score(self, name: str, value: float) -> Trace:
        """Return a copy with one score appended (keys are append-only)."""
        if name in self.scores:
            raise ValidationError(f"scores.{name}", "score key already present; scores are append-only")
        merged = dict(self.scores)
        merged[name] = value
        return replace(self, scores=merged)

    def with_tags(self, extra: Iterable[str]) -> Trace:
        return replace(self, tags=self.tags | frozenset(extra))

    def to_wire(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "project_id": self.project_id,
            "name": self.name,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "spans": [s.to_wire() for s in self.spans],
            "prompt_ref": (
                {"name": self.prompt_ref[0], "version": self.prompt_ref[1]}
                if self.prompt_ref
                else None
            ),
            "input": self.input,
            "output": self.output,
            "token_usage": self.token_usage.to_wire(),
            "scores": {k: self.scores[k] for k in sorted(self.scores)},
            "feedback": self.feedback,
            "tags": sorted(self.tags),
        }

    @classmethod
    def from_wire(cls, raw: Any, project_id: str | None = None) -> Trace:
        return validate_trace(raw, project_id=project_id)


def _check_scores(raw: Any) -> dict[str, float]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ValidationError("scores", "must be an object of metric name -> float")
    scores: dict[str, float] = {}
    for key, value in raw.items():
        check_id(key, f"scores.{key}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"scores.{key}", "must be a number")
        value = float(value)
        if not math.isfinite(value) or not 0.0 <= value <= 1.0:
            raise ValidationError(f"scores.{key}", "must lie in [0, 1]")
        scores[key] = value
    return scores


def _check_spans(raw: Any) -> tuple[Span, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, (list, tuple)):
        raise ValidationError("spans", "must be a list")
    spans = tuple(Span.from_wire(item, i) for i, item in enumerate(raw))
    seen: dict[str, int] = {}
    for i, span in enumerate(spans):
        if span.span_id in seen:
            raise ValidationError(f"spans[{i}].span_id", f"duplicate span id {span.span_id!r}")
        seen[span.span_id] = i
    # Parent links must land on a span in the same trace and form a forest.
    for i, span in enumerate(spans):
        if span.parent_span is None:
            continue
        if span.parent_span not in seen:
            raise ValidationError(
                f"spans[{i}].parent_span", f"references missing span {span.parent_span!r}"
            )
        walked = {span.span_id}
        cursor = span.parent_span
        while cursor is not None:
            if cursor in walked:
                raise ValidationError(f"spans[{i}].parent_span", "span parent links form a cycle")
            walked.add(cursor)
            cursor = spans[seen[cursor]].parent_span
    return spans


def validate_trace(candidate: Any, project_id: str | None = None) -> Trace:
    """Validate a trace-shaped record, returning a committed-ready Trace.

    Missing optional fields are filled with defaults; a missing trace_id is
    assigned server-side. The first violated invariant raises
    ValidationError naming the offending field.
    """
    if not isinstance(candidate, Mapping):
        raise ValidationError("trace", "must be an object")
    trace_id = candidate.get("trace_id") or new_id()
    check_id(trace_id, "trace_id")
    pid = project_id or candidate.get("project_id")
    if pid is None:
        raise ValidationError("project_id", "is required")
    check_id(pid, "project_id")
    name = candidate.get("name", "")
    if not isinstance(name, str):
        raise ValidationError("name", "must be a string")
    start = _check_ms(candidate.get("start_time", 0), "start_time")
    end = _check_ms(candidate.get("end_time", start), "end_time")
    if end < start:
        raise ValidationError("end_time", "end_time must be >= start_time")

    prompt_ref_raw = candidate.get("prompt_ref")
    prompt_ref: tuple[str, int] | None = None
    if prompt_ref_raw is not None:
        if not isinstance(prompt_ref_raw, Mapping):
            raise ValidationError("prompt_ref", "must be an object {name, version}")
        ref_name = prompt_ref_raw.get("name")
        ref_version = prompt_ref_raw.get("version")
        check_id(ref_name, "prompt_ref.name")
        if isinstance(ref_version, bool) or not isinstance(ref_version, int) or ref_version < 1:
            raise ValidationError("prompt_ref.version", "must be a positive integer")
        prompt_ref = (ref_name, ref_version)

    feedback = candidate.get("feedback")
    if feedback is not None and (isinstance(feedback, bool) or feedback not in (-1, 0, 1)):
        raise ValidationError("feedback", "must be -1, 0, or 1")

    tags_raw = candidate.get("tags") or []
    if not isinstance(tags_raw, (list, tuple, set, frozenset)):
        raise ValidationError("tags", "must be a list of strings")
    for tag in tags_raw:
        if not isinstance(tag, str) or not tag:
            raise ValidationError("tags", "tags must be nonempty strings")

    return Trace(
        trace_id=trace_id,
        project_id=pid,
        name=name,
        start_time=start,
        end_time=end,
        spans=_check_spans(candidate.get("spans")),
        prompt_ref=prompt_ref,
        input=_check_payload(candidate.get("input"), "input"),
        output=_check_payload(candidate.get("output"), "output"),
        token_usage=TokenUsage.from_wire(candidate.get("token_usage")),
        scores=_check_scores(candidate.get("scores")),
        feedback=feedback,
        tags=frozenset(tags_raw),
    )


@dataclass(frozen=True)
class PromptVersion:
    prompt_name: str
    version: int
    template: str
    metadata: Mapping[str, str] = field(default_factory=dict)
    created_at: int = 0
    created_by: str = ""
    commit_tag: str | None = None

    def to_wire(self) -> dict:
        return {
            "prompt_name": self.prompt_name,
            "version": self.version,
            "template": self.template,
            "metadata": {k: self.metadata[k] for k in sorted(self.metadata)},
            "created_at": self.created_at,
            "created_by": self.created_by,
            "commit_tag": self.commit_tag,
        }

    @classmethod
    def from_wire(cls, raw: Mapping) -> PromptVersion:
        return cls(
            prompt_name=raw["prompt_name"],
            version=raw["version"],
            template=raw["template"],
            metadata=dict(raw.get("metadata") or {}),
            created_at=raw.get("created_at", 0),
            created_by=raw.get("created_by", ""),
            commit_tag=raw.get("commit_tag"),
        )


# -- filter queries ----------------------------------------------------------


def _field_ops(field_path: str) -> frozenset[str]:
    if field_path.startswith("scores."):
        check_id(field_path[len("scores."):], field_path)
        return _NUMERIC_OPS
    ops = _FIELD_OPS.get(field_path)
    if ops is None:
        raise UnknownField(f"unknown field path {field_path!r}")
    return ops


def trace_field(trace: Trace, field_path: str) -> Any:
    """Extract a queryable field value from a trace; None when absent."""
    if field_path.startswith("scores."):
        return trace.scores.get(field_path[len("scores."):])
    if field_path == "name":
        return trace.name
    if field_path == "tags":
        return trace.tags
    if field_path == "feedback":
        return trace.feedback
    if field_path == "prompt_ref.name":
        return trace.prompt_ref[0] if trace.prompt_ref else None
    if field_path == "prompt_ref.version":
        return trace.prompt_ref[1] if trace.prompt_ref else None
    if field_path == "token_usage.prompt_tokens":
        return trace.token_usage.prompt_tokens
    if field_path == "token_usage.completion_tokens":
        return trace.token_usage.completion_tokens
    if field_path == "latency_ms":
        return trace.latency_ms
    if field_path == "start_time":
        return trace.start_time
    if field_path == "end_time":
        return trace.end_time
    if field_path == "error_present":
        return trace.error_present
    raise UnknownField(f"unknown field path {field_path!r}")


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: Any = None

    def __post_init__(self) -> None:
        ops = _field_ops(self.field)
        if self.op not in FILTER_OPS:
            raise ValidationError("op", f"unknown op {self.op!r}")
        if self.op not in ops:
            raise ValidationError("op", f"op {self.op!r} not supported on field {self.field!r}")
        if self.op in ("lt", "le", "gt", "ge"):
            if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
                raise ValidationError("value", f"op {self.op!r} requires a numeric value")

    def matches(self, trace: Trace) -> bool:
        actual = trace_field(trace, self.field)
        if self.op == "exists":
            present = bool(actual) if isinstance(actual, frozenset) else actual is not None
            want = True if self.value is None else bool(self.value)
            return present is want
        if self.field == "tags":
            # contains = membership
            return isinstance(self.value, str) and self.value in actual
        if actual is None:
            return False
        if self.op == "contains":
            return isinstance(self.value, str) and self.value in actual
        if self.op == "eq":
            return actual == self.value
        if self.op == "neq":
            return actual != self.value
        if isinstance(actual, bool):
            return False
        try:
            if self.op == "lt":
                return actual < self.value
            if self.op == "le":
                return actual <= self.value
            if self.op == "gt":
                return actual > self.value
            if self.op == "ge":
                return actual >= self.value
        except TypeError:
            return False
        return False

    def to_wire(self) -> dict:
        return {"field": self.field, "op": self.op, "value": self.value}

    @classmethod
    def from_wire(cls, raw: Any) -> Predicate:
        if isinstance(raw, (list, tuple)) and len(raw) in (2, 3):
            field_path, op = raw[0], raw[1]
            value = raw[2] if len(raw) == 3 else None
            return cls(field_path, op, value)
        if isinstance(raw, Mapping):
            return cls(raw.get("field"), raw.get("op"), raw.get("value"))
        raise ValidationError("predicates", "each predicate must be {field, op, value}")


DEFAULT_LIMIT = 50
MAX_LIMIT = 1000


@dataclass(frozen=True)
class FilterQuery:
    """Conjunctive predicate set + time range + ordering over traces."""

    project_id: str
    predicates: tuple[Predicate, ...] = ()
    time_range: tuple[int, int] | None = None  # half-open [from, to)
    order_by: tuple[str, str] = ("start_time", "desc")
    limit: int = DEFAULT_LIMIT
    cursor: str | None = None

    def __post_init__(self) -> None:
        check_id(self.project_id, "project_id")
        if self.time_range is not None:
            lo, hi = self.time_range
            if not isinstance(lo, int) or not isinstance(hi, int) or lo > hi:
                raise InvalidRange(f"invalid time range [{lo}, {hi})")
        order_field, direction = self.order_by
        if direction not in ("asc", "desc"):
            raise ValidationError("order_by", "direction must be 'asc' or 'desc'")
        if not (order_field in ORDERABLE_FIELDS or order_field.startswith("scores.")):
            raise UnknownField(f"cannot order by {order_field!r}")
        if not isinstance(self.limit, int) or not 1 <= self.limit <= MAX_LIMIT:
            raise ValidationError("limit", f"must be in 1..{MAX_LIMIT}")

    def matches(self, trace: Trace) -> bool:
        if trace.project_id != self.project_id:
            return False
        if self.time_range is not None:
            lo, hi = self.time_range
            if not lo <= trace.start_time < hi:
                return False
        return all(p.matches(trace) for p in self.predicates)

    def to_wire(self) -> dict:
        return {
            "project_id": self.project_id,
            "predicates": [p.to_wire() for p in self.predicates],
            "time_range": list(self.time_range) if self.time_range else None,
            "order_by": list(self.order_by),
            "limit": self.limit,
            "cursor": self.cursor,
        }

    @classmethod
    def from_wire(cls, raw: Mapping, project_id: str | None = None) -> FilterQuery:
        if not isinstance(raw, Mapping):
            raise ValidationError("query", "must be an object")
        preds_raw = raw.get("predicates") or []
        if not isinstance(preds_raw, (list, tuple)):
            raise ValidationError("predicates", "must be a list")
        time_range = raw.get("time_range")
        if time_range is not None:
            if not isinstance(time_range, (list, tuple)) or len(time_range) != 2:
                raise InvalidRange("time_range must be [from, to)")
            time_range = (time_range[0], time_range[1])
        order_by = raw.get("order_by") or ("start_time", "desc")
        if not isinstance(order_by, (list, tuple)) or len(order_by) != 2:
            raise ValidationError("order_by", "must be [field, asc|desc]")
        return cls(
            project_id=project_id or raw.get("project_id"),
            predicates=tuple(Predicate.from_wire(p) for p in preds_raw),
            time_range=time_range,
            order_by=(order_by[0], order_by[1]),
            limit=raw.get("limit") or DEFAULT_LIMIT,
            cursor=raw.get("cursor"),
        )
