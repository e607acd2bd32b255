"""Trace-emitting client: builders, batching, and retrying delivery.

Delivery is at-least-once: trace ids are client-generated 128-bit random
values, so the server's duplicate rule turns retries into effective
exactly-once. A background flusher drains the queue in batches (at most
100 traces, at least every 2 seconds) and retries transport failures with
jittered exponential backoff (0.5s base, doubling, 30s cap) until the
server takes the batch.

The enqueue path never raises on transport trouble; when the bounded
queue is full the client either blocks (default) or drops and counts,
per ``queue_full``.
"""

from __future__ import annotations

import atexit
import functools
import json
import logging
import os
import queue
import random
import secrets
import threading
import time
import urllib.error
import urllib.request

logger = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:7465"
MAX_BATCH = 100
FLUSH_INTERVAL_S = 2.0
BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 30.0

SPAN_KINDS = ("llm_call", "tool_call", "evaluation", "other")


def now_ms() -> int:
    return int(time.time() * 1000)


def new_trace_id() -> str:
    return secrets.token_hex(16)  # 128-bit random, unique per process lifetime


class TraceBuilder:
    """Accumulates one trace; hand it back via ``finish()``.

    Builders are single-owner objects: build on one thread, finish once.
    """

    def __init__(self, client: AideClient, project: str, name: str, trace_id: str | None = None,
                 start_time: int | None = None):
        self._client = client
        self.project = project
        self.trace_id = trace_id or new_trace_id()
        self.name = name
        self.start_time = start_time if start_time is not None else now_ms()
        self.end_time: int | None = None
        self.spans: list[dict] = []
        self.input = ""
        self.output = ""
        self.prompt_ref: dict | None = None
        self.token_usage = {"prompt_tokens": 0, "completion_tokens": 0}
        self.scores: dict[str, float] = {}
        self.feedback: int | None = None
        self.tags: list[str] = []
        self._finished = False

    def add_span(self, kind: str, name: str, input: str = "", output: str = "",
                 usage: dict | None = None, start_time: int | None = None,
                 end_time: int | None = None, parent_span: str | None = None,
                 error: str | None = None, span_id: str | None = None) -> TraceBuilder:
        if kind not in SPAN_KINDS:
            raise ValueError(f"span kind must be one of {SPAN_KINDS}")
        start = start_time if start_time is not None else now_ms()
        span = {
            "span_id": span_id or secrets.token_hex(8),
            "parent_span": parent_span,
            "kind": kind,
            "name": name,
            "input": input,
            "output": output,
            "start_time": start,
            "end_time": end_time if end_time is not None else max(start, now_ms()),
            "token_usage": usage,
            "error": error,
        }
        self.spans.append(span)
        if usage:
            self.token_usage["prompt_tokens"] += usage.get("prompt_tokens", 0)
            self.token_usage["completion_tokens"] += usage.get("completion_tokens", 0)
        return self

    def set_io(self, input: str | None = None, output: str | None = None) -> TraceBuilder:
        if input is not None:
            self.input = input
        if output is not None:
            self.output = output
        return self

    def set_usage(self, prompt_tokens: int, completion_tokens: int) -> TraceBuilder:
        self.token_usage = {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens}
        return self

    def set_prompt_ref(self, name: str, version: int) -> TraceBuilder:
        self.prompt_ref = {"name": name, "version": version}
        return self

    def set_feedback(self, value: int) -> TraceBuilder:
        self.feedback = value
        return self

    def add_score(self, name: str, value: float) -> TraceBuilder:
        self.scores[name] = value
        return self

    def add_tag(self, tag: str) -> TraceBuilder:
        self.tags.append(tag)
        return self

    def to_wire(self) -> dict:
        end = self.end_time if self.end_time is not None else max(self.start_time, now_ms())
        return {
            "trace_id": self.trace_id,
            "project_id": self.project,
            "name": self.name,
            "start_time": self.start_time,
            "end_time": end,
            "spans": list(self.spans),
            "prompt_ref": self.prompt_ref,
            "input": self.input,
            "output": self.output,
            "token_usage": dict(self.token_usage),
            "scores": {k: self.scores[k] for k in sorted(self.scores)},
            "feedback": self.feedback,
            "tags": sorted(set(self.tags)),
        }

    def finish(self, end_time: int | None = None) -> str:
        """Compute end_time and queue the trace for sending; returns trace_id."""
        if self._finished:
            return self.trace_id
        self._finished = True
        self.end_time = end_time if end_time is not None else max(self.start_time, now_ms())
        self._client._enqueue(self.project, self.to_wire())
        return self.trace_id


class AideClient:
    def __init__(
        self,
        addr: str | None = None,
        api_key: str | None = None,
        *,
        batch_size: int = MAX_BATCH,
        flush_interval: float = FLUSH_INTERVAL_S,
        queue_capacity: int = 10_000,
        queue_full: str = "block",
        request_timeout: float = 10.0,
        backoff_base: float = BACKOFF_BASE_S,
        backoff_cap: float = BACKOFF_CAP_S,
        register_atexit: bool = True,
    ) -> None:
        addr = addr or os.environ.get("AIDE_HTTP_ADDR", DEFAULT_ADDR)
        self.base = addr if addr.startswith("http") else f"http://{addr}"
        self.api_key = api_key if api_key is not None else os.environ.get("AIDE_API_KEY")
        if queue_full not in ("block", "drop"):
            raise ValueError("queue_full must be 'block' or 'drop'")
        self.batch_size = min(batch_size, MAX_BATCH)
        self.flush_interval = flush_interval
        self.queue_full = queue_full
        self.request_timeout = request_timeout
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.dropped = 0
        self.rejected = 0
        self.sent = 0
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._closed = threading.Event()
        self._idle = threading.Event()
        self._idle.set()
        self._worker = threading.Thread(target=self._run, name="aide-sdk-flusher", daemon=True)
        self._worker.start()
        if register_atexit:
            atexit.register(self.close)

    # -- public api -----------------------------------------------------------

    def start_trace(self, project: str, name: str, **kw) -> TraceBuilder:
        return TraceBuilder(self, project, name, **kw)

    def trace(self, project: str, name: str | None = None, kind: str = "other"):
        """Decorator: time the wrapped call and log it as a one-span trace."""

        def decorate(fn):
            trace_name = name or fn.__name__

            @functools.wraps(fn)
            def wrapper(*args, **kwargs):
                builder = self.start_trace(project, trace_name)
                builder.set_io(input=repr((args, kwargs)))
                start = now_ms()
                try:
                    result = fn(*args, **kwargs)
                except Exception as exc:
                    builder.add_span(kind, trace_name, start_time=start, error=repr(exc))
                    builder.finish()
                    raise
                output = result if isinstance(result, str) else repr(result)
                builder.set_io(output=output)
                builder.add_span(kind, trace_name, output=output, start_time=start)
                builder.finish()
                return result

            return wrapper

        return decorate

    def flush(self, timeout: float | None = 30.0) -> bool:
        """Block until everything enqueued so far has been sent (or timeout)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not (self._queue.empty() and self._idle.is_set()):
            if deadline is not None and time.monotonic() > deadline:
                return False
            time.sleep(0.02)
        return True

    def close(self, timeout: float | None = 30.0) -> bool:
        """Flush and stop the background worker."""
        if self._closed.is_set():
            return True
        drained = self.flush(timeout)
        self._closed.set()
        self._worker.join(timeout=5)
        return drained

    # -- internals ---------------------------------------------------------------

    def _enqueue(self, project: str, trace_wire: dict) -> None:
        item = (project, trace_wire)
        if self.queue_full == "drop":
            try:
                self._queue.put_nowait(item)
            except queue.Full:
                self.dropped += 1
        else:
            self._queue.put(item)

    def _run(self) -> None:
        while True:
            batch = self._collect()
            if batch:
                self._idle.clear()
                try:
                    for project, traces in batch.items():
                        self._send_with_retry(project, traces)
                finally:
                    self._idle.set()
            elif self._closed.is_set():
                return

    def _collect(self) -> dict[str, list[dict]]:
        """Drain up to batch_size traces, waiting at most flush_interval."""
        deadline = time.monotonic() + self.flush_interval
        items: list[tuple[str, dict]] = []
        while len(items) < self.batch_size:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                items.append(self._queue.get(timeout=min(remaining, 0.1)))
            except queue.Empty:
                if self._closed.is_set() or items:
                    break
        grouped: dict[str, list[dict]] = {}
        for project, trace in items:
            grouped.setdefault(project, []).append(trace)
        return grouped

    def _send_with_retry(self, project: str, traces: list[dict]) -> None:
        attempt = 0
        while True:
            try:
                results = self._post_batch(project, traces)
            except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
                delay = min(self.backoff_cap, self.backoff_base * (2**attempt))
                delay *= 0.5 + random.random() / 2  # jitter in [0.5, 1.0] of the step
                attempt += 1
                logger.debug("batch send failed (%s); retry %d in %.2fs", exc, attempt, delay)
                time.sleep(delay)
                continue
            for result in results:
                if result.get("ok"):
                    self.sent += 1
                else:
                    self.rejected += 1
                    logger.warning("server rejected trace: %s", result.get("error"))
            return

    def _post_batch(self, project: str, traces: list[dict]) -> list[dict]:
        body = json.dumps({"traces": traces}, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        request = urllib.request.Request(
            f"{self.base}/v1/projects/{project}/traces:batch", data=body, method="POST"
        )
        request.add_header("Content-Type", "application/json")
        if self.api_key:
            request.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(request, timeout=self.request_timeout) as response:
            return json.loads(response.read())["results"]
