"""Deterministic trace evaluators producing named scores in [0, 1].

This is the pluggable seam where heavier (model-based) scorers would
attach; everything shipped here is a pure function of the trace so scores
are reproducible bit-for-bit. The usual hallucination-style signal is
configured as a ``keyword_coverage`` evaluator over reference facts with
``invert: true`` — i.e. the fraction of expected facts *missing* from the
output. That is a proxy, and deliberately labeled as one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import EvaluatorError, ValidationError
from .model import Trace, check_id, trace_field

EVALUATOR_KINDS = ("regex_match", "regex_absent", "length_range", "keyword_coverage", "numeric_range")

_NUMERIC_FIELDS = frozenset(
    {
        "feedback",
        "prompt_ref.version",
        "token_usage.prompt_tokens",
        "token_usage.completion_tokens",
        "latency_ms",
        "start_time",
        "end_time",
    }
)


@dataclass(frozen=True)
class EvaluatorSpec:
    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_wire(cls, raw: Any) -> EvaluatorSpec:
        if not isinstance(raw, Mapping):
            raise ValidationError("evaluator", "must be an object {name, kind, params}")
        name = raw.get("name")
        check_id(name, "evaluator.name")
        kind = raw.get("kind")
        if kind not in EVALUATOR_KINDS:
            raise ValidationError("evaluator.kind", f"must be one of {', '.join(EVALUATOR_KINDS)}")
        params = raw.get("params") or {}
        if not isinstance(params, Mapping):
            raise ValidationError("evaluator.params", "must be an object")
        spec = cls(name=name, kind=kind, params=dict(params))
        _validate_params(spec)
        return spec


def _validate_params(spec: EvaluatorSpec) -> None:
    p = spec.params
    where = f"evaluator[{spec.name}].params"
    if spec.kind in ("regex_match", "regex_absent"):
        pattern = p.get("pattern")
        if not isinstance(pattern, str) or not pattern:
            raise ValidationError(where, "pattern is required")
        try:
            re.compile(pattern)
        except re.error as exc:
            raise ValidationError(where, f"pattern does not compile: {exc}") from exc
    elif spec.kind == "length_range":
        lo, hi = p.get("min_chars"), p.get("max_chars")
        if not isinstance(lo, int) or not isinstance(hi, int) or lo < 0 or hi < lo:
            raise ValidationError(where, "min_chars/max_chars must satisfy 0 <= min <= max")
    elif spec.kind == "keyword_coverage":
        keywords = p.get("keywords")
        if not isinstance(keywords, (list, tuple)) or not keywords:
            raise ValidationError(where, "keywords must be a nonempty list")
        if any(not isinstance(k, str) or not k for k in keywords):
            raise ValidationError(where, "keywords must be nonempty strings")
    elif spec.kind == "numeric_range":
        fp = p.get("field")
        if fp not in _NUMERIC_FIELDS and not (isinstance(fp, str) and fp.startswith("scores.")):
            raise ValidationError(where, f"field {fp!r} is not a numeric trace field")
        lo, hi = p.get("min"), p.get("max")
        if not isinstance(lo, (int, float)) or not isinstance(hi, (int, float)) or hi < lo:
            raise ValidationError(where, "min/max must satisfy min <= max")


def _clamp(value: float) -> float:
    return min(1.0, max(0.0, value))


def _length_score(n: int, lo: int, hi: int) -> float:
    """1.0 inside [lo, hi]; linear falloff hitting 0.0 at twice the violated
    bound (2*hi above, lo/2 below)."""
    if lo <= n <= hi:
        return 1.0
    if n > hi:
        if hi == 0:
            return 0.0
        return _clamp(2.0 - n / hi)
    return _clamp(2.0 * n / lo - 1.0)


def evaluate(spec: EvaluatorSpec, trace: Trace) -> float:
    """Score one trace with one evaluator. Pure and deterministic."""
    p = spec.params
    if spec.kind == "regex_match":
        return 1.0 if re.search(p["pattern"], trace.output) else 0.0
    if spec.kind == "regex_absent":
        return 0.0 if re.search(p["pattern"], trace.output) else 1.0
    if spec.kind == "length_range":
        return _length_score(len(trace.output), p["min_chars"], p["max_chars"])
    if spec.kind == "keyword_coverage":
        haystack = trace.output.lower()
        hits = sum(1 for kw in p["keywords"] if kw.lower() in haystack)
        coverage = hits / len(p["keywords"])
        return _clamp(1.0 - coverage if p.get("invert") else coverage)
    if spec.kind == "numeric_range":
        try:
            value = trace_field(trace, p["field"])
        except Exception as exc:
            raise EvaluatorError(spec.name, str(exc)) from exc
        if value is None or isinstance(value, bool) or not isinstance(value, (int, float)):
            return 0.0
        return 1.0 if p["min"] <= value <= p["max"] else 0.0
    raise EvaluatorError(spec.name, f"unknown evaluator kind {spec.kind!r}")


def run_all(specs: list[EvaluatorSpec], trace: Trace) -> tuple[dict[str, float], list[EvaluatorError]]:
    """Apply every enabled evaluator; errors are collected, never raised.

    Returns (scores keyed by evaluator name, errors). A failing evaluator
    contributes no score; ingestion turns each error into an
    ``evaluator_error:<name>`` tag on the trace.
    """
    scores: dict[str, float] = {}
    errors: list[EvaluatorError] = []
    for spec in specs:
        try:
            scores[spec.name] = _clamp(float(evaluate(spec, trace)))
        except EvaluatorError as exc:
            errors.append(exc)
        except Exception as exc:  # defensive: a bad pattern edge, etc.
            errors.append(EvaluatorError(spec.name, str(exc)))
    return scores, errors
