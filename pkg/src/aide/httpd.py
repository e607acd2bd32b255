"""HTTP transport: REST endpoints, JSON-RPC over HTTP, and the SSE stream.

Every REST route translates its path/query/body into tool arguments and
dispatches through the same ``call_tool`` path the JSON-RPC transports
use, then writes the canonical encoding of the result — so the three
transports return byte-identical payloads by construction.

Auth is a single static bearer token (when configured): every route but
/healthz requires ``Authorization: Bearer <key>``.
"""

from __future__ import annotations

import hmac
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from .errors import AideError, ValidationError
from .server import AideServer
from .tools import (
    JSONRPC_APPLICATION_ERROR,
    JSONRPC_INVALID_PARAMS,
    JSONRPC_INVALID_REQUEST,
    JSONRPC_METHOD_NOT_FOUND,
    JSONRPC_PARSE_ERROR,
    ToolError,
    call_tool,
    list_tools,
)
from .wire import canonical_json, decode_json

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 256 << 20

_STATUS_BY_KIND = {
    "ValidationError": 400,
    "UnknownField": 400,
    "InvalidRange": 400,
    "WindowTooWide": 400,
    "BatchTooLarge": 400,
    "EmptyTemplate": 400,
    "EmptyRun": 400,
    "EmptyWindow": 400,
    "ScoreOutOfRange": 400,
    "EvaluatorError": 400,
    "Unauthorized": 401,
    "UnknownProject": 404,
    "UnknownTrace": 404,
    "UnknownPrompt": 404,
    "UnknownVersion": 404,
    "UnknownRun": 404,
    "UnknownExperiment": 404,
    "UnknownBinding": 404,
    "UnknownProposal": 404,
    "UnknownRule": 404,
    "NoHistory": 404,
    "DuplicateTraceId": 409,
    "VersionConflict": 409,
    "ExperimentAlreadyRunning": 409,
    "ExperimentNotRunning": 409,
    "IllegalTransition": 409,
    "PausedAgent": 409,
    "StorageFull": 507,
    "CorruptLog": 500,
}


def status_for_kind(kind: str) -> int:
    return _STATUS_BY_KIND.get(kind, 500)


class _Ctx:
    __slots__ = ("groups", "query", "body")

    def __init__(self, groups: dict, query: dict, body: Any) -> None:
        self.groups = groups
        self.query = query
        self.body = body

    def q(self, name: str, default: str | None = None) -> str | None:
        values = self.query.get(name)
        return values[0] if values else default

    def q_int(self, name: str, default: int | None = None) -> int | None:
        raw = self.q(name)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ValidationError(name, "must be an integer") from exc

    def q_json(self, name: str) -> Any:
        raw = self.q(name)
        if raw is None:
            return None
        try:
            return decode_json(raw)
        except ValueError as exc:
            raise ValidationError(name, f"must be URL-encoded JSON: {exc}") from exc

    def time_range_params(self) -> list[int] | None:
        lo, hi = self.q_int("from"), self.q_int("to")
        if lo is None and hi is None:
            return None
        if lo is None or hi is None:
            raise ValidationError("time_range", "both from and to are required")
        return [lo, hi]


_ROUTES: list[tuple[str, re.Pattern, Callable]] = []

_SEG = "[A-Za-z0-9._-]+"


def _route(method: str, pattern: str):
    compiled = re.compile("^" + pattern + "$")

    def register(fn):
        _ROUTES.append((method, compiled, fn))
        return fn

    return register


# -- trace routes -------------------------------------------------------------


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/traces:batch")
def _r_log_batch(server, ctx):
    body = ctx.body
    traces = body.get("traces") if isinstance(body, dict) else body
    return call_tool(server, "log_batch", {"project_id": ctx.groups["project"], "traces": traces})


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/traces")
def _r_log_trace(server, ctx):
    return call_tool(server, "log_trace", {"project_id": ctx.groups["project"], "trace": ctx.body})


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/traces/count")
def _r_count(server, ctx):
    args: dict = {"project_id": ctx.groups["project"]}
    time_range = ctx.time_range_params()
    if time_range is not None:
        args["time_range"] = time_range
    return call_tool(server, "count_traces", args)


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/traces/latest")
def _r_latest(server, ctx):
    args: dict = {"project_id": ctx.groups["project"]}
    predicates = ctx.q_json("filter")
    if predicates is not None:
        args["predicates"] = predicates
    return call_tool(server, "latest_trace", args)


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/traces/(?P<trace>{_SEG})")
def _r_get_trace(server, ctx):
    return call_tool(
        server, "get_trace", {"project_id": ctx.groups["project"], "trace_id": ctx.groups["trace"]}
    )


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/traces")
def _r_search(server, ctx):
    args = ctx.q_json("filter") or {}
    if not isinstance(args, dict):
        raise ValidationError("filter", "must be a JSON object")
    args["project_id"] = ctx.groups["project"]
    if ctx.q("limit") is not None:
        args["limit"] = ctx.q_int("limit")
    if ctx.q("cursor") is not None:
        args["cursor"] = ctx.q("cursor")
    return call_tool(server, "search_traces", args)


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/metrics")
def _r_metrics(server, ctx):
    lo, hi = ctx.q_int("from"), ctx.q_int("to")
    if lo is None or hi is None:
        raise ValidationError("window", "from and to are required")
    return call_tool(
        server,
        "aggregate_metrics",
        {
            "project_id": ctx.groups["project"],
            "window": [lo, hi],
            "bucket_width_ms": ctx.q_int("bucket", 60_000),
        },
    )


@_route("PUT", f"/v1/projects/(?P<project>{_SEG})/evaluators")
def _r_evaluators(server, ctx):
    body = ctx.body
    specs = body.get("evaluators") if isinstance(body, dict) else body
    if not isinstance(specs, list):
        raise ValidationError("evaluators", "must be a list of evaluator specs")
    return server.set_evaluators(ctx.groups["project"], specs)


# -- prompts -------------------------------------------------------------------


@_route("PUT", f"/v1/prompts/(?P<name>{_SEG})")
def _r_save_prompt(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    args = {"prompt_name": ctx.groups["name"]}
    for key in ("template", "metadata", "expected_latest", "created_by", "commit_tag"):
        if key in body:
            args[key] = body[key]
    return call_tool(server, "save_prompt", args)


@_route("GET", f"/v1/prompts/(?P<name>{_SEG})")
def _r_get_prompt(server, ctx):
    args: dict = {"prompt_name": ctx.groups["name"]}
    if ctx.q("version") is not None:
        args["version"] = ctx.q_int("version")
    return call_tool(server, "get_prompt", args)


@_route("GET", "/v1/prompts")
def _r_list_prompts(server, ctx):
    args = {}
    if ctx.q("project") is not None:
        args["project_id"] = ctx.q("project")
    return call_tool(server, "list_prompts", args)


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/bindings/(?P<name>{_SEG}):activate")
def _r_activate(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(
        server,
        "activate_prompt",
        {
            "project_id": ctx.groups["project"],
            "prompt_name": ctx.groups["name"],
            "version": body.get("version"),
        },
    )


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/bindings/(?P<name>{_SEG}):rollback")
def _r_rollback(server, ctx):
    return call_tool(
        server,
        "rollback_prompt",
        {"project_id": ctx.groups["project"], "prompt_name": ctx.groups["name"]},
    )


# -- gate / drift ----------------------------------------------------------------


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/gates/(?P<run>{_SEG}):evaluate")
def _r_gate(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    args = {
        "project_id": ctx.groups["project"],
        "run_id": ctx.groups["run"],
        "configs": body.get("configs"),
    }
    if body.get("commit_tag") is not None:
        args["commit_tag"] = body["commit_tag"]
    return call_tool(server, "evaluate_gate", args)


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/drift:check")
def _r_drift(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(server, "drift_check", {"project_id": ctx.groups["project"], **body})


# -- experiments -------------------------------------------------------------------


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/experiments")
def _r_start_experiment(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(server, "start_experiment", {"project_id": ctx.groups["project"], **body})


@_route("POST", f"/v1/experiments/(?P<eid>{_SEG})/outcomes")
def _r_outcome(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(server, "record_outcome", {"experiment_id": ctx.groups["eid"], **body})


@_route("POST", f"/v1/experiments/(?P<eid>{_SEG}):evaluate")
def _r_eval_experiment(server, ctx):
    return call_tool(server, "evaluate_experiment", {"experiment_id": ctx.groups["eid"]})


@_route("POST", f"/v1/experiments/(?P<eid>{_SEG}):stop")
def _r_stop_experiment(server, ctx):
    return server.stop_experiment(ctx.groups["eid"])


@_route("GET", f"/v1/experiments/(?P<eid>{_SEG})")
def _r_get_experiment(server, ctx):
    return server.get_experiment(ctx.groups["eid"])


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/route")
def _r_route(server, ctx):
    return call_tool(
        server,
        "route_request",
        {
            "project_id": ctx.groups["project"],
            "prompt_name": ctx.q("prompt"),
            "request_key": ctx.q("key"),
        },
    )


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/agents/(?P<agent>{_SEG}):pause")
def _r_pause(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(
        server,
        "set_agent_state",
        {
            "project_id": ctx.groups["project"],
            "agent_name": ctx.groups["agent"],
            "state": "paused",
            "reason": body.get("reason", ""),
        },
    )


@_route("POST", f"/v1/projects/(?P<project>{_SEG})/agents/(?P<agent>{_SEG}):resume")
def _r_resume(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(
        server,
        "set_agent_state",
        {
            "project_id": ctx.groups["project"],
            "agent_name": ctx.groups["agent"],
            "state": "active",
            "reason": body.get("reason", ""),
        },
    )


# -- rules / proposals ----------------------------------------------------------------


@_route("PUT", f"/v1/projects/(?P<project>{_SEG})/rules/(?P<rule>{_SEG})")
def _r_put_rule(server, ctx):
    rule = dict(ctx.body) if isinstance(ctx.body, dict) else {}
    rule.setdefault("rule_id", ctx.groups["rule"])
    if rule["rule_id"] != ctx.groups["rule"]:
        raise ValidationError("rule_id", "body rule_id must match the path")
    return call_tool(server, "register_rule", {"project_id": ctx.groups["project"], "rule": rule})


@_route("GET", f"/v1/projects/(?P<project>{_SEG})/rules")
def _r_list_rules(server, ctx):
    return server.list_rules(ctx.groups["project"])


@_route("GET", "/v1/proposals")
def _r_list_proposals(server, ctx):
    args = {}
    if ctx.q("status") is not None:
        args["status"] = ctx.q("status")
    if ctx.q("project") is not None:
        args["project_id"] = ctx.q("project")
    return call_tool(server, "list_proposals", args)


@_route("POST", f"/v1/proposals/(?P<pid>{_SEG}):resolve")
def _r_resolve(server, ctx):
    body = ctx.body if isinstance(ctx.body, dict) else {}
    return call_tool(
        server,
        "resolve_proposal",
        {
            "proposal_id": ctx.groups["pid"],
            "resolution": body.get("resolution"),
            "note": body.get("note", ""),
        },
    )


@_route("GET", "/v1/tools")
def _r_tools(server, ctx):
    return {"tools": list_tools()}


# -- the handler ------------------------------------------------------------------------


class ApiHandler(BaseHTTPRequestHandler):
    server_version = "aide/0.1"
    protocol_version = "HTTP/1.1"

    @property
    def aide(self) -> AideServer:
        return self.server.aide  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # route access logs through logging
        logger.debug("%s - %s", self.address_string(), fmt % args)

    # -- plumbing ---------------------------------------------------------------

    def _read_body(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            raise ValidationError("body", f"request body exceeds {MAX_BODY_BYTES} bytes")
        if length == 0:
            return None
        raw = self.rfile.read(length)
        if not raw:
            return None
        try:
            return decode_json(raw)
        except ValueError as exc:
            raise ValidationError("body", f"invalid JSON: {exc}") from exc

    def _send(self, status: int, payload: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_error_body(self, status: int, kind: str, message: str, **extra) -> None:
        body = {"error": {"kind": kind, "message": message, **extra}}
        self._send(status, canonical_json(body))

    def _authorized(self) -> bool:
        key = self.aide.config.api_key
        if not key:
            return True
        header = self.headers.get("Authorization") or ""
        return header.startswith("Bearer ") and hmac.compare_digest(header[7:], key)

    # -- dispatch ----------------------------------------------------------------

    def _handle(self, method: str) -> None:
        split = urlsplit(self.path)
        path, query = split.path, parse_qs(split.query)
        if path == "/healthz":
            self._send(200, canonical_json(self.aide.health()))
            return
        if not self._authorized():
            self._send_error_body(401, "Unauthorized", "missing or invalid bearer token")
            return
        if method == "POST" and path == "/rpc":
            self._handle_rpc()
            return
        if method == "GET" and re.fullmatch(f"/v1/projects/{_SEG}/stream", path):
            self._handle_stream(path, query)
            return
        for route_method, pattern, fn in _ROUTES:
            if route_method != method:
                continue
            match = pattern.match(path)
            if match is None:
                continue
            try:
                ctx = _Ctx(match.groupdict(), query, self._read_body())
                result = fn(self.aide, ctx)
            except ToolError as exc:
                self._send_tool_error(exc)
            except AideError as exc:
                self._send_error_body(status_for_kind(exc.kind), exc.kind, exc.message, **exc.details)
            except Exception:
                logger.exception("unhandled error for %s %s", method, path)
                self._send_error_body(500, "InternalError", "internal server error")
            else:
                self._send(200, canonical_json(result))
            return
        self._send_error_body(404, "NotFound", f"no route for {method} {path}")

    def _send_tool_error(self, exc: ToolError) -> None:
        if exc.code == JSONRPC_METHOD_NOT_FOUND:
            self._send_error_body(404, "UnknownTool", exc.message)
        elif exc.code == JSONRPC_INVALID_PARAMS:
            self._send_error_body(400, "ValidationError", exc.message)
        elif exc.data is not None and "kind" in exc.data:
            kind = exc.data["kind"]
            self._send(status_for_kind(kind), canonical_json({"error": exc.data}))
        else:
            self._send_error_body(500, "InternalError", exc.message)

    # -- JSON-RPC over HTTP ---------------------------------------------------------

    def _handle_rpc(self) -> None:
        try:
            request = self._read_body()
        except ValidationError as exc:
            self._send(200, _rpc_error_envelope(None, JSONRPC_PARSE_ERROR, exc.message))
            return
        self._send(200, rpc_dispatch(self.aide, request))

    # -- SSE --------------------------------------------------------------------------

    def _handle_stream(self, path: str, query: dict) -> None:
        project = path.split("/")[3]
        from_seq = 0
        predicates = None
        try:
            ctx = _Ctx({}, query, None)
            from_seq = ctx.q_int("from_seq", 0) or 0
            predicates = ctx.q_json("filter")
            subscription = self.aide.subscribe(project, predicates, from_seq)
        except AideError as exc:
            self._send_error_body(status_for_kind(exc.kind), exc.kind, exc.message, **exc.details)
            return
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        self.close_connection = True
        try:
            self.wfile.write(b"retry: 1000\n\n")
            self.wfile.flush()
            for event in subscription.events():
                frame = (
                    f"id: {event['seq']}\n"
                    f"event: {event['kind']}\n"
                    f"data: ".encode()
                    + canonical_json(event["payload"])
                    + b"\n\n"
                )
                self.wfile.write(frame)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.aide.hub.unsubscribe(subscription.subscriber_id)

    def do_GET(self) -> None:
        self._handle("GET")

    def do_POST(self) -> None:
        self._handle("POST")

    def do_PUT(self) -> None:
        self._handle("PUT")


# -- JSON-RPC core (shared with the stdio transport) ---------------------------------


def _rpc_id_bytes(request_id: Any) -> bytes:
    return canonical_json(request_id)


def _rpc_error_envelope(request_id: Any, code: int, message: str, data: dict | None = None) -> bytes:
    error: dict = {"code": code, "message": message}
    if data is not None:
        error["data"] = data
    return (
        b'{"jsonrpc":"2.0","id":'
        + _rpc_id_bytes(request_id)
        + b',"error":'
        + canonical_json(error)
        + b"}"
    )


def _rpc_result_envelope(request_id: Any, result_bytes: bytes) -> bytes:
    # The result payload bytes are embedded verbatim: the envelope never
    # re-serializes them, so they are identical across transports.
    return (
        b'{"jsonrpc":"2.0","id":'
        + _rpc_id_bytes(request_id)
        + b',"result":'
        + result_bytes
        + b"}"
    )


def rpc_dispatch(server: AideServer, request: Any) -> bytes:
    """Dispatch one JSON-RPC 2.0 request object to the tool surface.

    Methods: any tool name directly, ``tools/list``, or ``tools/call``
    with ``{"name": ..., "arguments": ...}``.
    """
    if not isinstance(request, dict):
        return _rpc_error_envelope(None, JSONRPC_INVALID_REQUEST, "request must be an object")
    request_id = request.get("id")
    if request.get("jsonrpc") != "2.0" or not isinstance(request.get("method"), str):
        return _rpc_error_envelope(request_id, JSONRPC_INVALID_REQUEST, "not a JSON-RPC 2.0 request")
    method = request["method"]
    params = request.get("params")
    try:
        if method == "tools/list":
            result = {"tools": list_tools()}
        elif method == "tools/call":
            if not isinstance(params, dict) or not isinstance(params.get("name"), str):
                raise ToolError(JSONRPC_INVALID_PARAMS, "tools/call needs {name, arguments}")
            result = call_tool(server, params["name"], params.get("arguments"))
        else:
            result = call_tool(server, method, params)
    except ToolError as exc:
        return _rpc_error_envelope(request_id, exc.code, exc.message, exc.data)
    except AideError as exc:
        return _rpc_error_envelope(request_id, JSONRPC_APPLICATION_ERROR, exc.message, exc.to_wire())
    except Exception:
        logger.exception("unhandled error in rpc method %s", method)
        return _rpc_error_envelope(request_id, JSONRPC_APPLICATION_ERROR, "internal server error")
    return _rpc_result_envelope(request_id, canonical_json(result))


class HttpTransport:
    """Owns the listening socket and its handler threads."""

    def __init__(self, aide: AideServer, host: str | None = None, port: int | None = None) -> None:
        self.aide = aide
        host = host if host is not None else aide.config.host
        port = port if port is not None else aide.config.port
        self.httpd = ThreadingHTTPServer((host, port), ApiHandler)
        self.httpd.daemon_threads = True
        self.httpd.aide = aide  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="aide-http", daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.aide.hub.close()  # ends SSE streams so handler threads exit
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
