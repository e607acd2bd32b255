"""Trace ingestion: validate, evaluate, commit, fan out.

Evaluation runs synchronously in the commit path (all evaluators are
deterministic and local), so a successful ack means the trace is durable
*and* fully scored — the read-your-write loop stays simple. Batches can
defer evaluation via config, in which case scores land as score_append
records right after the items commit.

Duplicate handling is by (project, trace_id, content-hash of the submitted
record): byte-identical resubmits are idempotent successes, conflicting
content is an error. The hash is taken before server-side scores are
merged, so a client retry after a partially-observed ack still matches.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from typing import Any, Callable

from .clock import now_ms
from .errors import AideError, BatchTooLarge, DuplicateTraceId, UnknownProject
from .evaluators import EvaluatorSpec, run_all
from .query import TraceIndex
from .storage import Store, check_project_id
from .wire import canonical_json

logger = logging.getLogger(__name__)

DEFAULT_BATCH_MAX = 500
EVALUATOR_ERROR_TAG = "evaluator_error:"


def content_hash(trace_wire: dict) -> str:
    return hashlib.sha256(canonical_json(trace_wire)).hexdigest()


class IngestService:
    def __init__(
        self,
        store: Store,
        index: TraceIndex,
        evaluators_for: Callable[[str], list[EvaluatorSpec]],
        *,
        auto_create_projects: bool = True,
        batch_max: int = DEFAULT_BATCH_MAX,
        defer_batch_eval: bool = False,
    ) -> None:
        self._store = store
        self._index = index
        self._evaluators_for = evaluators_for
        self._auto_create = auto_create_projects
        self._batch_max = batch_max
        self._defer_batch_eval = defer_batch_eval
        self._lock = threading.Lock()

    def _check_project(self, project_id: str) -> None:
        check_project_id(project_id)
        if self._auto_create:
            return
        if not self._index.known_project(project_id) and project_id not in self._store.project_dirs():
            raise UnknownProject(f"unknown project {project_id!r} (auto-creation disabled)")

    def log_trace(self, project_id: str, record: Any, *, skip_eval: bool = False) -> dict:
        """Validate, score, and durably commit one trace.

        Returns {trace_id, seq, duplicate}; resubmitting an identical
        record succeeds idempotently without storing a second copy.
        """
        from .model import validate_trace

        self._check_project(project_id)
        trace = validate_trace(record, project_id=project_id)
        submitted_hash = content_hash(trace.to_wire())

        if not skip_eval:
            scores, errors = run_all(self._evaluators_for(project_id), trace)
            for name, value in scores.items():
                if name not in trace.scores:
                    trace = trace.with_score(name, value)
            if errors:
                trace = trace.with_tags(EVALUATOR_ERROR_TAG + e.name for e in errors)

        with self._lock:
            existing = self._index.get(project_id, trace.trace_id)
            if existing is not None:
                if self._index.content_hash(project_id, trace.trace_id) == submitted_hash:
                    return {"trace_id": trace.trace_id, "seq": existing[1], "duplicate": True}
                raise DuplicateTraceId(
                    f"trace {trace.trace_id!r} already exists in {project_id!r} with different content"
                )
            appended = self._store.append(
                project_id,
                "trace",
                {"trace": trace.to_wire(), "content_hash": submitted_hash},
            )
        return {"trace_id": trace.trace_id, "seq": appended.seq, "duplicate": False}

    def log_batch(self, project_id: str, records: Any) -> list[dict]:
        """Commit a batch item by item; partial success is expected.

        Results align with input order; items keep their relative order in
        the assigned sequence numbers.
        """
        self._check_project(project_id)
        if not isinstance(records, (list, tuple)):
            from .errors import ValidationError

            raise ValidationError("traces", "must be a list of trace records")
        if len(records) > self._batch_max:
            raise BatchTooLarge(f"batch of {len(records)} exceeds limit {self._batch_max}")
        results: list[dict] = []
        committed: list[str] = []
        for item in records:
            try:
                result = self.log_trace(project_id, item, skip_eval=self._defer_batch_eval)
                results.append({"ok": True, **result})
                if not result["duplicate"]:
                    committed.append(result["trace_id"])
            except AideError as exc:
                results.append({"ok": False, "error": exc.to_wire()})
        if self._defer_batch_eval and committed:
            self._append_deferred_scores(project_id, committed)
        return results

    def _append_deferred_scores(self, project_id: str, trace_ids: list[str]) -> None:
        specs = self._evaluators_for(project_id)
        if not specs:
            return
        for trace_id in trace_ids:
            found = self._index.get(project_id, trace_id)
            if found is None:
                continue
            trace, _ = found
            scores, errors = run_all(specs, trace)
            for error in errors:
                logger.warning("deferred evaluator %s failed on %s: %s", error.name, trace_id, error.message)
            for name, value in scores.items():
                if name not in trace.scores:
                    self.append_score(project_id, trace_id, name, value)

    def append_score(self, project_id: str, trace_id: str, name: str, value: float) -> int:
        """Append one score key to a committed trace (append-only map)."""
        from .errors import UnknownTrace, ValidationError
        from .model import check_id

        check_id(name, "name")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise ValidationError(f"scores.{name}", "must lie in [0, 1]")
        with self._lock:
            found = self._index.get(project_id, trace_id)
            if found is None:
                raise UnknownTrace(f"no trace {trace_id!r} in project {project_id!r}")
            trace, _ = found
            if name in trace.scores:
                raise ValidationError(
                    f"scores.{name}", "score key already present; scores are append-only"
                )
            record = self._store.append(
                project_id,
                "score_append",
                {
                    "project_id": project_id,
                    "trace_id": trace_id,
                    "name": name,
                    "value": float(value),
                    "at": now_ms(),
                },
            )
        return record.seq
