"""Subscriber fan-out over committed records.

Each subscriber gets a bounded queue fed in commit order (the hub runs as
a store observer, under the append lock). Resume works by sequence number:
at subscribe time the hub registers the live queue first and then reads
the historical records, and the consumer merges the two seq-ascending
streams by skipping anything at or below the last sequence it yielded —
that is what makes delivery exactly-once even across the replay/live
boundary.

A subscriber whose queue overflows is lagging: delivery to it stops, and
after the consumer drains what was queued it receives one terminal error
event and the stream ends.
"""

from __future__ import annotations

import itertools
import queue
import threading
from typing import Iterator

from .model import Predicate, Trace
from .storage import LogRecord, Store

STREAM_KINDS = ("trace", "binding_change", "experiment_event", "agent_state")
DEFAULT_QUEUE_DEPTH = 1024

_CLOSE = object()


def record_event(record: LogRecord) -> dict:
    return {"seq": record.seq, "kind": record.kind, "payload": record.payload}


class Subscription:
    def __init__(
        self,
        subscriber_id: str,
        project_id: str,
        predicates: tuple[Predicate, ...],
        replay: list[dict],
        depth: int,
    ) -> None:
        self.subscriber_id = subscriber_id
        self.project_id = project_id
        self.predicates = predicates
        self._replay = replay
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._lagging = False
        self._closed = False

    def _offer(self, event: dict) -> None:
        if self._lagging or self._closed:
            return
        try:
            self._queue.put_nowait(event)
        except queue.Full:
            self._lagging = True

    def close(self) -> None:
        self._closed = True
        try:
            self._queue.put_nowait(_CLOSE)
        except queue.Full:
            pass

    def events(self, poll_interval: float = 0.25) -> Iterator[dict]:
        """Yield events in sequence order until closed or lagging.

        Blocks waiting for live events; a terminal
        ``{"kind": "error", ...}`` event is the last thing a lagging
        subscriber sees.
        """
        last = 0
        for event in self._replay:
            if event["seq"] > last:
                last = event["seq"]
                yield event
        while True:
            try:
                event = self._queue.get(timeout=poll_interval)
            except queue.Empty:
                if self._closed:
                    return
                if self._lagging and self._queue.empty():
                    yield self._lagging_event(last)
                    return
                continue
            if event is _CLOSE:
                return
            if event["seq"] <= last:
                continue  # already delivered during replay
            last = event["seq"]
            yield event
            if self._lagging and self._queue.empty():
                yield self._lagging_event(last)
                return

    @staticmethod
    def _lagging_event(last: int) -> dict:
        return {
            "seq": last,
            "kind": "error",
            "payload": {
                "kind": "LaggingSubscriber",
                "message": "subscriber queue overflowed; stream closed",
            },
        }


class EventHub:
    def __init__(self, store: Store, depth: int = DEFAULT_QUEUE_DEPTH) -> None:
        self._store = store
        self._depth = depth
        self._lock = threading.Lock()
        self._subs: dict[str, Subscription] = {}
        self._ids = itertools.count(1)

    def _matches(self, sub: Subscription, record: LogRecord) -> bool:
        if record.dir_key != sub.project_id or record.kind not in STREAM_KINDS:
            return False
        if record.kind == "trace" and sub.predicates:
            trace = Trace.from_wire(record.payload["trace"])
            return all(p.matches(trace) for p in sub.predicates)
        return True

    def publish(self, record: LogRecord) -> None:
        """Store observer: runs under the append lock, in commit order."""
        if record.kind not in STREAM_KINDS:
            return
        with self._lock:
            subs = list(self._subs.values())
        for sub in subs:
            if self._matches(sub, record):
                sub._offer(record_event(record))

    def subscribe(
        self,
        project_id: str,
        predicates: tuple[Predicate, ...] = (),
        from_seq: int = 0,
    ) -> Subscription:
        sub = Subscription(
            subscriber_id=f"sub-{next(self._ids)}",
            project_id=project_id,
            predicates=predicates,
            replay=[],
            depth=self._depth,
        )
        with self._lock:
            self._subs[sub.subscriber_id] = sub
        # Registered first, replayed second: anything committed in between
        # shows up in both streams and is deduped by sequence number.
        replay = []
        for record in self._store.records(project_id):
            if record.seq > from_seq and self._matches(sub, record):
                replay.append(record_event(record))
        replay.sort(key=lambda e: e["seq"])
        sub._replay.extend(replay)
        return sub

    def unsubscribe(self, subscriber_id: str) -> None:
        with self._lock:
            sub = self._subs.pop(subscriber_id, None)
        if sub is not None:
            sub.close()

    def close(self) -> None:
        with self._lock:
            subs = list(self._subs.values())
            self._subs.clear()
        for sub in subs:
            sub.close()
