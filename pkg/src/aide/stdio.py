"""stdio JSON-RPC transport with LSP-style Content-Length framing.

Each message is ``Content-Length: <n>\\r\\n\\r\\n<n bytes of JSON>``. One
response frame is written per request frame, carrying the same ``id``;
this is the transport editor integrations speak over a spawned process.
"""

from __future__ import annotations

import logging
from typing import BinaryIO

from .httpd import rpc_dispatch
from .server import AideServer
from .wire import decode_json

logger = logging.getLogger(__name__)

MAX_FRAME_BYTES = 256 << 20

_PARSE_ERROR = (
    b'{"jsonrpc":"2.0","id":null,"error":{"code":-32700,"message":"parse error"}}'
)


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one Content-Length framed message; None at EOF."""
    length = None
    while True:
        line = stream.readline()
        if not line:
            return None
        line = line.strip()
        if not line:
            break  # blank line ends the header block
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            try:
                length = int(value.strip())
            except ValueError:
                return None
    if length is None or not 0 <= length <= MAX_FRAME_BYTES:
        return None
    body = stream.read(length)
    if body is None or len(body) != length:
        return None
    return body


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    stream.write(f"Content-Length: {len(payload)}\r\n\r\n".encode("ascii"))
    stream.write(payload)
    stream.flush()


def serve(server: AideServer, stdin: BinaryIO, stdout: BinaryIO) -> None:
    """Serve until stdin closes."""
    while True:
        frame = read_frame(stdin)
        if frame is None:
            return
        try:
            request = decode_json(frame)
        except ValueError:
            write_frame(stdout, _PARSE_ERROR)
            continue
        write_frame(stdout, rpc_dispatch(server, request))


class StdioClient:
    """Framed JSON-RPC client over a pair of byte streams (tests, tooling)."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO) -> None:
        self._reader = reader
        self._writer = writer
        self._next_id = 1

    def call_raw(self, method: str, params=None) -> bytes:
        from .wire import canonical_json

        request = {"jsonrpc": "2.0", "id": self._next_id, "method": method}
        if params is not None:
            request["params"] = params
        self._next_id += 1
        write_frame(self._writer, canonical_json(request))
        response = read_frame(self._reader)
        if response is None:
            raise ConnectionError("stdio server closed the stream")
        return response

    def call(self, method: str, params=None) -> dict:
        return decode_json(self.call_raw(method, params))
