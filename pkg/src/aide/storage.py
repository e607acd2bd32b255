"""Durable append-only record log with snapshots and crash recovery.

Layout on disk, one directory per project (plus a reserved ``_registry``
directory for server-global records such as prompt versions):

    <data_dir>/<project_id>/log-<epoch>.ndj    one record per line
    <data_dir>/<project_id>/snapshot-<seq>.bin gzip'd compacted records

Each log line is ``{"seq":…, "kind":…, "crc":…, "payload":…}`` where crc
is the 32-bit CRC of the canonical encoding of the payload. Sequence
numbers are global across the store and strictly increasing. An append is
acknowledged only after the line has been flushed and fsync'd, so every
acknowledged record survives a process kill.

Recovery policy is fail-stop tail truncation: the first record in a file
that fails to parse or fails its checksum ends that file; the corrupt tail
is physically truncated so later appends remain recoverable. Snapshots are
an optimization only — logs are never deleted, so a missing or unreadable
snapshot degrades to full log replay.
"""

from __future__ import annotations

import gzip
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import CorruptLog, StorageFull, ValidationError
from .wire import canonical_json, crc32_of, decode_json

logger = logging.getLogger(__name__)

RECORD_KINDS = (
    "trace",
    "score_append",
    "prompt_version",
    "binding_change",
    "experiment_event",
    "gate_result",
    "rule_change",
    "proposal_event",
    "agent_state",
)

# Directory for records that are global to the server rather than owned by
# one project (prompt versions). Not a legal project id.
REGISTRY_DIR = "_registry"

_LOG_NAME = re.compile(r"^log-(\d+)\.ndj$")
_SNAP_NAME = re.compile(r"^snapshot-(\d+)\.bin$")


def check_project_id(project_id: Any) -> str:
    from .model import check_id

    check_id(project_id, "project_id")
    if project_id in (".", "..") or project_id.startswith("_"):
        raise ValidationError("project_id", f"{project_id!r} is reserved")
    return project_id


@dataclass(frozen=True)
class LogRecord:
    seq: int
    kind: str
    payload: Any
    crc: int
    dir_key: str

    @property
    def time_key(self) -> int:
        """Ordering timestamp: trace start_time, or the payload's `at` field."""
        if self.kind == "trace":
            return self.payload["trace"]["start_time"]
        return self.payload.get("at", 0) if isinstance(self.payload, dict) else 0

    def to_line(self) -> bytes:
        return canonical_json(
            {"seq": self.seq, "kind": self.kind, "crc": self.crc, "payload": self.payload}
        ) + b"\n"


def _parse_line(line: bytes, dir_key: str) -> LogRecord | None:
    try:
        raw = decode_json(line)
    except ValueError:
        return None
    if not isinstance(raw, dict):
        return None
    seq, kind, crc, payload = raw.get("seq"), raw.get("kind"), raw.get("crc"), raw.get("payload")
    if not isinstance(seq, int) or kind not in RECORD_KINDS or not isinstance(crc, int):
        return None
    if crc32_of(payload) != crc:
        return None
    return LogRecord(seq=seq, kind=kind, payload=payload, crc=crc, dir_key=dir_key)


class Store:
    """Single-node record store: one writer lock, lock-free readers.

    Readers work off list snapshots (list() copies) and never take the
    append lock, so they cannot block writers. Appends are serialized:
    sequence assignment, the durable write, and observer fan-out all happen
    under one lock, which is what gives subscribers commit-order delivery.
    """

    def __init__(
        self,
        data_dir: str | Path,
        *,
        fsync: bool = True,
        max_log_bytes: int | None = None,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.fsync = fsync
        self.max_log_bytes = max_log_bytes
        self._lock = threading.Lock()
        self._records: dict[str, list[LogRecord]] = {}
        self._global: list[LogRecord] = []
        self._handles: dict[str, Any] = {}
        self._seq = 0
        self._bytes = 0
        self._observers: list[Callable[[LogRecord], None]] = []
        self.corruption_events: list[dict] = []
        self._recover()

    # -- recovery ------------------------------------------------------------

    def _recover(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        for entry in sorted(self.data_dir.iterdir()):
            if entry.is_dir():
                self._recover_dir(entry)
        self._global.sort(key=lambda r: r.seq)
        if self._global:
            self._seq = self._global[-1].seq
        for key, records in self._records.items():
            records.sort(key=lambda r: r.seq)

    def _recover_dir(self, path: Path) -> None:
        dir_key = path.name
        by_seq: dict[int, LogRecord] = {}
        snap = self._load_latest_snapshot(path, dir_key)
        for record in snap:
            by_seq[record.seq] = record
        for log_path in self._log_files(path):
            for record in self._read_log(log_path, dir_key):
                by_seq[record.seq] = record
        records = sorted(by_seq.values(), key=lambda r: r.seq)
        self._records[dir_key] = records
        self._global.extend(records)
        self._bytes += sum(len(r.to_line()) for r in records)

    def _log_files(self, path: Path) -> list[Path]:
        files = []
        for entry in path.iterdir():
            m = _LOG_NAME.match(entry.name)
            if m:
                files.append((int(m.group(1)), entry))
        return [p for _, p in sorted(files)]

    def _read_log(self, log_path: Path, dir_key: str) -> list[LogRecord]:
        records: list[LogRecord] = []
        data = log_path.read_bytes()
        offset, total = 0, len(data)
        while offset < total:
            newline = data.find(b"\n", offset)
            end = total if newline == -1 else newline
            line = data[offset:end]
            record = _parse_line(line, dir_key) if line else None
            if record is None:
                self._truncate_tail(log_path, offset, total)
                break
            records.append(record)
            if newline == -1:
                # Complete record whose trailing newline was torn off by a
                # crash; the record itself is CRC-valid, so repair the file.
                with open(log_path, "ab") as fh:
                    fh.write(b"\n")
                break
            offset = newline + 1
        return records

    def _truncate_tail(self, log_path: Path, offset: int, total: int) -> None:
        self.corruption_events.append(
            {"path": str(log_path), "offset": offset, "dropped_bytes": total - offset}
        )
        logger.warning("truncating corrupt log tail: %s at offset %d", log_path, offset)
        with open(log_path, "r+b") as fh:
            fh.truncate(offset)

    def _load_latest_snapshot(self, path: Path, dir_key: str) -> list[LogRecord]:
        snaps = []
        for entry in path.iterdir():
            m = _SNAP_NAME.match(entry.name)
            if m:
                snaps.append((int(m.group(1)), entry))
        for _, snap_path in sorted(snaps, reverse=True):
            try:
                raw = decode_json(gzip.decompress(snap_path.read_bytes()))
                records = []
                for item in raw["records"]:
                    record = _parse_line(canonical_json(item), dir_key)
                    if record is None:
                        raise CorruptLog("bad record in snapshot", path=str(snap_path))
                    records.append(record)
                return records
            except (OSError, ValueError, KeyError, CorruptLog):
                logger.warning("ignoring unreadable snapshot %s; falling back", snap_path)
        return []

    # -- writes --------------------------------------------------------------

    def _open_handle(self, dir_key: str):
        handle = self._handles.get(dir_key)
        if handle is not None:
            return handle
        dir_path = self.data_dir / dir_key
        dir_path.mkdir(parents=True, exist_ok=True)
        epoch = int(time.time() * 1000)
        while (dir_path / f"log-{epoch}.ndj").exists():
            epoch += 1
        handle = open(dir_path / f"log-{epoch}.ndj", "ab")
        self._handles[dir_key] = handle
        return handle

    def append(self, dir_key: str, kind: str, payload: Any) -> LogRecord:
        """Durably append one record; returns it once flushed to disk."""
        if kind not in RECORD_KINDS:
            raise ValidationError("kind", f"unknown record kind {kind!r}")
        crc = crc32_of(payload)
        with self._lock:
            record = LogRecord(
                seq=self._seq + 1, kind=kind, payload=payload, crc=crc, dir_key=dir_key
            )
            line = record.to_line()
            if self.max_log_bytes is not None and self._bytes + len(line) > self.max_log_bytes:
                raise StorageFull(
                    f"store would exceed {self.max_log_bytes} bytes", limit=self.max_log_bytes
                )
            handle = self._open_handle(dir_key)
            handle.write(line)
            handle.flush()
            if self.fsync:
                os.fsync(handle.fileno())
            self._seq = record.seq
            self._bytes += len(line)
            self._records.setdefault(dir_key, []).append(record)
            self._global.append(record)
            for observer in self._observers:
                try:
                    observer(record)
                except Exception:
                    logger.exception("record observer failed for seq %d", record.seq)
        return record

    def snapshot(self, dir_key: str | None = None) -> list[Path]:
        """Write compacted snapshot files and roll the active logs."""
        written = []
        with self._lock:
            keys = [dir_key] if dir_key else list(self._records)
            for key in keys:
                records = self._records.get(key)
                if not records:
                    continue
                snap_seq = records[-1].seq
                body = {
                    "snapshot_seq": snap_seq,
                    "records": [
                        {"seq": r.seq, "kind": r.kind, "crc": r.crc, "payload": r.payload}
                        for r in records
                    ],
                }
                dir_path = self.data_dir / key
                dir_path.mkdir(parents=True, exist_ok=True)
                target = dir_path / f"snapshot-{snap_seq}.bin"
                tmp = dir_path / f".snapshot-{snap_seq}.tmp"
                tmp.write_bytes(gzip.compress(canonical_json(body)))
                os.replace(tmp, target)
                handle = self._handles.pop(key, None)
                if handle is not None:
                    handle.close()
                written.append(target)
        return written

    def close(self) -> None:
        with self._lock:
            for handle in self._handles.values():
                handle.close()
            self._handles.clear()

    def add_observer(self, fn: Callable[[LogRecord], None]) -> None:
        """Register a commit-order observer, called under the append lock."""
        self._observers.append(fn)

    # -- reads ---------------------------------------------------------------

    @property
    def last_seq(self) -> int:
        return self._seq

    def records(self, dir_key: str) -> list[LogRecord]:
        """Commit-order snapshot of one directory's records."""
        return list(self._records.get(dir_key, ()))

    def all_records(self) -> list[LogRecord]:
        """Commit-order snapshot of every record in the store."""
        return list(self._global)

    def scan(
        self,
        project_id: str,
        time_range: tuple[int, int] | None = None,
        kind: str | None = None,
    ) -> list[LogRecord]:
        """All committed matching records, ordered by record time then seq.

        Linearizable with respect to completed appends: any append that
        returned before this call is reflected in the result.
        """
        if kind is not None and kind not in RECORD_KINDS:
            raise ValidationError("kind", f"unknown record kind {kind!r}")
        out = []
        for record in self._records.get(project_id, ()):
            if kind is not None and record.kind != kind:
                continue
            if time_range is not None:
                lo, hi = time_range
                if not lo <= record.time_key < hi:
                    continue
            out.append(record)
        out.sort(key=lambda r: (r.time_key, r.seq))
        return out

    def project_dirs(self) -> list[str]:
        return [k for k in sorted(self._records) if k != REGISTRY_DIR]


def read_log_records(data_dir: str | Path, from_seq: int = 0) -> Iterable[LogRecord]:
    """Offline reader used by `replay`: walks the raw log files directly."""
    store = Store(data_dir, fsync=False)
    try:
        for record in sorted(store.all_records(), key=lambda r: r.seq):
            if record.seq > from_seq:
                yield record
    finally:
        store.close()
