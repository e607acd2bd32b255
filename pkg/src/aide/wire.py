"""Canonical JSON wire encoding.

One encoding is used everywhere: the on-disk log, REST bodies, JSON-RPC
results, and SSE payloads. Rules:

- UTF-8 JSON, compact separators, no ASCII escaping of non-ASCII text.
- Object keys appear in type-definition order; map-valued fields (scores,
  metadata) are emitted with sorted keys.
- Timestamps are integer milliseconds since the Unix epoch (UTC).
- Floats use Python's shortest round-trip repr; NaN/Infinity are rejected.

The same input object therefore always produces the same bytes, which is
what makes cross-transport byte-equality and log checksums testable.
"""

from __future__ import annotations

import json
from typing import Any

__all__ = ["canonical_json", "decode_json", "crc32_of"]


def canonical_json(obj: Any) -> bytes:
    """Encode ``obj`` as canonical UTF-8 JSON bytes."""
    return json.dumps(
        obj,
        ensure_ascii=False,
        separators=(",", ":"),
        allow_nan=False,
    ).encode("utf-8")


def decode_json(data: bytes | str) -> Any:
    """Decode UTF-8 JSON, rejecting NaN/Infinity (not valid wire values)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")

    def reject_constant(value: str) -> float:
        raise ValueError(f"non-finite number not allowed on the wire: {value}")

    return json.loads(data, parse_constant=reject_constant)


def crc32_of(payload: Any) -> int:
    """32-bit CRC of the canonical encoding of ``payload``."""
    import zlib

    return zlib.crc32(canonical_json(payload)) & 0xFFFFFFFF
