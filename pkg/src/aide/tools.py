"""Tool surface: JSON-RPC 2.0 dispatch shared by every transport.

Exactly 22 tools are exposed, listed lexicographically. Arguments are
validated against each tool's input schema before dispatch (violations map
to JSON-RPC -32602), unknown tools to -32601, and application errors to
-32000 with ``data.kind`` carrying the error class name. The REST routes
call the same handlers, which is what makes cross-transport byte-equality
hold by construction.
"""

from __future__ import annotations

from typing import Any, Callable

import jsonschema

from .errors import AideError

JSONRPC_PARSE_ERROR = -32700
JSONRPC_INVALID_REQUEST = -32600
JSONRPC_METHOD_NOT_FOUND = -32601
JSONRPC_INVALID_PARAMS = -32602
JSONRPC_APPLICATION_ERROR = -32000


class ToolError(Exception):
    def __init__(self, code: int, message: str, data: dict | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data

    def to_wire(self) -> dict:
        err: dict = {"code": self.code, "message": self.message}
        if self.data is not None:
            err["data"] = self.data
        return err


_ID = {"type": "string", "pattern": "^[A-Za-z0-9._-]{1,128}$"}
_OPT_ID = {"type": ["string", "null"], "pattern": "^[A-Za-z0-9._-]{1,128}$"}
_MS = {"type": "integer", "minimum": 0}
_RANGE = {
    "type": ["array", "null"],
    "items": _MS,
    "minItems": 2,
    "maxItems": 2,
    "description": "half-open [from, to) in ms epoch",
}
_WINDOW = {"type": "array", "items": _MS, "minItems": 2, "maxItems": 2}
_PREDICATES = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "field": {"type": "string"},
            "op": {"enum": ["eq", "neq", "lt", "le", "gt", "ge", "contains", "exists"]},
            "value": {},
        },
        "required": ["field", "op"],
    },
}
_TRACE_OBJ = {"type": "object", "description": "trace record in canonical wire form"}

_TRACE_EXAMPLE = {
    "trace_id": "t-0001",
    "name": "qa",
    "start_time": 1700000000000,
    "end_time": 1700000000900,
    "token_usage": {"prompt_tokens": 10, "completion_tokens": 20},
    "scores": {"hallucination": 0.7},
    "tags": [],
}


def _obj(properties: dict, required: list[str], example: dict, extra_ok: bool = False) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": extra_ok,
        "examples": [example],
    }


def _out(properties: dict, required: list[str], example: dict) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "required": required,
        "examples": [example],
    }


def _descriptor(name: str, description: str, input_schema: dict, output_schema: dict) -> dict:
    return {
        "tool_name": name,
        "description": description,
        "input_schema": input_schema,
        "output_schema": output_schema,
    }


TOOL_DESCRIPTORS: dict[str, dict] = {}
_HANDLERS: dict[str, Callable[[Any, dict], dict]] = {}


def _tool(name: str, description: str, input_schema: dict, output_schema: dict):
    def register(fn: Callable[[Any, dict], dict]):
        TOOL_DESCRIPTORS[name] = _descriptor(name, description, input_schema, output_schema)
        _HANDLERS[name] = fn
        return fn

    return register


@_tool(
    "log_trace",
    "Validate, evaluate, and durably commit one trace to a project.",
    _obj(
        {"project_id": _ID, "trace": _TRACE_OBJ},
        ["project_id", "trace"],
        {"project_id": "demo", "trace": _TRACE_EXAMPLE},
    ),
    _out(
        {"trace_id": {"type": "string"}, "seq": {"type": "integer"}, "duplicate": {"type": "boolean"}},
        ["trace_id", "seq", "duplicate"],
        {"trace_id": "t-0001", "seq": 12, "duplicate": False},
    ),
)
def _log_trace(server, args):
    return server.log_trace(args["project_id"], args["trace"])


@_tool(
    "log_batch",
    "Commit up to 500 traces; items succeed or fail independently, in order.",
    _obj(
        {"project_id": _ID, "traces": {"type": "array", "items": _TRACE_OBJ}},
        ["project_id", "traces"],
        {"project_id": "demo", "traces": [_TRACE_EXAMPLE]},
    ),
    _out(
        {"results": {"type": "array", "items": {"type": "object"}}},
        ["results"],
        {"results": [{"ok": True, "trace_id": "t-0001", "seq": 12, "duplicate": False}]},
    ),
)
def _log_batch(server, args):
    return server.log_batch(args["project_id"], args["traces"])


@_tool(
    "get_trace",
    "Fetch one committed trace by id.",
    _obj(
        {"project_id": _ID, "trace_id": _ID},
        ["project_id", "trace_id"],
        {"project_id": "demo", "trace_id": "t-0001"},
    ),
    _out(
        {"trace": {"type": "object"}, "seq": {"type": "integer"}},
        ["trace", "seq"],
        {"trace": _TRACE_EXAMPLE, "seq": 12},
    ),
)
def _get_trace(server, args):
    return server.get_trace(args["project_id"], args["trace_id"])


@_tool(
    "search_traces",
    "Filtered, ordered, cursor-paged trace search (conjunctive predicates).",
    _obj(
        {
            "project_id": _ID,
            "predicates": _PREDICATES,
            "time_range": _RANGE,
            "order_by": {
                "type": "array",
                "items": {"type": "string"},
                "minItems": 2,
                "maxItems": 2,
            },
            "limit": {"type": "integer", "minimum": 1, "maximum": 1000},
            "cursor": {"type": ["string", "null"]},
        },
        ["project_id"],
        {
            "project_id": "demo",
            "predicates": [{"field": "scores.hallucination", "op": "ge", "value": 0.6}],
            "limit": 5,
        },
    ),
    _out(
        {
            "traces": {"type": "array", "items": {"type": "object"}},
            "next_cursor": {"type": ["string", "null"]},
        },
        ["traces", "next_cursor"],
        {"traces": [_TRACE_EXAMPLE], "next_cursor": None},
    ),
)
def _search_traces(server, args):
    return server.search_traces(args, project_id=args["project_id"])


@_tool(
    "count_traces",
    "Number of committed traces in a project, optionally within [from, to).",
    _obj(
        {"project_id": _ID, "time_range": _RANGE},
        ["project_id"],
        {"project_id": "demo"},
    ),
    _out({"count": {"type": "integer", "minimum": 0}}, ["count"], {"count": 42}),
)
def _count_traces(server, args):
    return server.count_traces(args["project_id"], args.get("time_range"))


@_tool(
    "latest_trace",
    "Most recent committed trace matching optional predicates (ties: later commit wins).",
    _obj(
        {"project_id": _ID, "predicates": _PREDICATES},
        ["project_id"],
        {
            "project_id": "demo",
            "predicates": [{"field": "scores.hallucination", "op": "ge", "value": 0.6}],
        },
    ),
    _out(
        {"trace": {"type": ["object", "null"]}, "seq": {"type": ["integer", "null"]}},
        ["trace", "seq"],
        {"trace": _TRACE_EXAMPLE, "seq": 12},
    ),
)
def _latest_trace(server, args):
    return server.latest_trace(args["project_id"], args.get("predicates"))


@_tool(
    "aggregate_metrics",
    "Time-bucketed aggregate report: counts, token usage, latency p50/p95, score means, feedback.",
    _obj(
        {"project_id": _ID, "window": _WINDOW, "bucket_width_ms": {"type": "integer", "minimum": 1000}},
        ["project_id", "window", "bucket_width_ms"],
        {"project_id": "demo", "window": [1700000000000, 1700003600000], "bucket_width_ms": 60000},
    ),
    _out(
        {
            "project_id": {"type": "string"},
            "window": _WINDOW,
            "bucket_width_ms": {"type": "integer"},
            "buckets": {"type": "array", "items": {"type": "object"}},
        },
        ["project_id", "window", "bucket_width_ms", "buckets"],
        {
            "project_id": "demo",
            "window": [0, 1000],
            "bucket_width_ms": 1000,
            "buckets": [
                {
                    "bucket_start": 0,
                    "trace_count": 0,
                    "token_usage": {
                        "prompt_tokens": {"sum": 0, "mean": None},
                        "completion_tokens": {"sum": 0, "mean": None},
                    },
                    "latency_ms": {"mean": None, "p50": None, "p95": None},
                    "scores": {},
                    "feedback": {"negative": 0, "neutral": 0, "positive": 0},
                }
            ],
        },
    ),
)
def _aggregate_metrics(server, args):
    return server.aggregate_metrics(args["project_id"], args["window"], args["bucket_width_ms"])


@_tool(
    "save_prompt",
    "Save a new immutable prompt version (optimistic CAS via expected_latest).",
    _obj(
        {
            "prompt_name": _ID,
            "template": {"type": "string", "minLength": 1},
            "metadata": {"type": "object", "additionalProperties": {"type": "string"}},
            "expected_latest": {"type": ["integer", "null"], "minimum": 0},
            "created_by": {"type": "string"},
            "commit_tag": {"type": ["string", "null"]},
        },
        ["prompt_name", "template"],
        {"prompt_name": "qa-system", "template": "Answer briefly.", "commit_tag": "ci-opt-run-17"},
    ),
    _out({"prompt": {"type": "object"}}, ["prompt"], {
        "prompt": {
            "prompt_name": "qa-system", "version": 1, "template": "Answer briefly.",
            "metadata": {}, "created_at": 1700000000000, "created_by": "", "commit_tag": None,
        }
    }),
)
def _save_prompt(server, args):
    return server.save_prompt(
        args["prompt_name"],
        args["template"],
        args.get("metadata"),
        expected_latest=args.get("expected_latest"),
        created_by=args.get("created_by", ""),
        commit_tag=args.get("commit_tag"),
    )


@_tool(
    "get_prompt",
    "Fetch a prompt version (latest when version omitted).",
    _obj(
        {"prompt_name": _ID, "version": {"type": ["integer", "null"], "minimum": 1}},
        ["prompt_name"],
        {"prompt_name": "qa-system", "version": 2},
    ),
    _out({"prompt": {"type": "object"}}, ["prompt"], {
        "prompt": {
            "prompt_name": "qa-system", "version": 2, "template": "Answer briefly.",
            "metadata": {}, "created_at": 1700000000000, "created_by": "", "commit_tag": None,
        }
    }),
)
def _get_prompt(server, args):
    return server.get_prompt(args["prompt_name"], args.get("version"))


@_tool(
    "list_prompts",
    "List prompt summaries (latest version; active version when project_id given).",
    _obj({"project_id": _OPT_ID}, [], {"project_id": "demo"}),
    _out(
        {"prompts": {"type": "array", "items": {"type": "object"}}},
        ["prompts"],
        {"prompts": [{"prompt_name": "qa-system", "latest_version": 3, "active_version": 2}]},
    ),
)
def _list_prompts(server, args):
    return server.list_prompts(args.get("project_id"))


@_tool(
    "activate_prompt",
    "Set the active version served for a (project, prompt) binding.",
    _obj(
        {"project_id": _ID, "prompt_name": _ID, "version": {"type": "integer", "minimum": 1}},
        ["project_id", "prompt_name", "version"],
        {"project_id": "demo", "prompt_name": "qa-system", "version": 2},
    ),
    _out({"binding": {"type": "object"}}, ["binding"], {
        "binding": {"project_id": "demo", "prompt_name": "qa-system", "active_version": 2, "experiment": None}
    }),
)
def _activate_prompt(server, args):
    return server.activate_prompt(args["project_id"], args["prompt_name"], args["version"])


@_tool(
    "rollback_prompt",
    "Restore the previously activated version for a binding (stack semantics).",
    _obj(
        {"project_id": _ID, "prompt_name": _ID},
        ["project_id", "prompt_name"],
        {"project_id": "demo", "prompt_name": "qa-system"},
    ),
    _out({"binding": {"type": "object"}}, ["binding"], {
        "binding": {"project_id": "demo", "prompt_name": "qa-system", "active_version": 1, "experiment": None}
    }),
)
def _rollback_prompt(server, args):
    return server.rollback_prompt(args["project_id"], args["prompt_name"])


_GATE_CONFIG = {
    "type": "object",
    "properties": {
        "metric_name": {"type": "string"},
        "baseline_window": {"type": "integer", "minimum": 1},
        "relative_drop_threshold": {"type": "number"},
        "k_sigma": {"type": "number", "minimum": 0},
        "min_baseline_runs": {"type": "integer", "minimum": 1},
        "direction": {"enum": ["higher_is_better", "lower_is_better"]},
    },
    "required": ["metric_name"],
}


@_tool(
    "evaluate_gate",
    "Deterministic CI verdict for a run against its metric baselines.",
    _obj(
        {
            "project_id": _ID,
            "run_id": _ID,
            "configs": {"type": "array", "items": _GATE_CONFIG, "minItems": 1},
            "commit_tag": {"type": ["string", "null"]},
        },
        ["project_id", "run_id", "configs"],
        {"project_id": "demo", "run_id": "ci-17", "configs": [{"metric_name": "relevance"}]},
    ),
    _out({"verdict": {"type": "object"}}, ["verdict"], {
        "verdict": {
            "run_id": "ci-17", "pass": False,
            "details": [{
                "metric_name": "relevance", "current_mean": 0.8, "baseline_mean": 0.9,
                "baseline_std": 0.0, "relative_change": -0.1111, "rule_triggered": "relative_drop",
            }],
        }
    }),
)
def _evaluate_gate(server, args):
    return server.evaluate_gate(
        args["project_id"], args["run_id"], args["configs"], args.get("commit_tag")
    )


@_tool(
    "drift_check",
    "Relative change of a metric mean between two time windows vs a percent threshold.",
    _obj(
        {
            "project_id": _ID,
            "metric_name": _ID,
            "window_a": _WINDOW,
            "window_b": _WINDOW,
            "threshold_pct": {"type": "number", "minimum": 0},
        },
        ["project_id", "metric_name", "window_a", "window_b", "threshold_pct"],
        {
            "project_id": "demo", "metric_name": "relevance",
            "window_a": [0, 1000], "window_b": [1000, 2000], "threshold_pct": 15,
        },
    ),
    _out({"report": {"type": "object"}}, ["report"], {
        "report": {
            "metric_name": "relevance", "window_a": [0, 1000], "window_b": [1000, 2000],
            "mean_a": 0.5, "mean_b": 0.6, "change_pct": 20.0, "threshold_pct": 15, "triggered": True,
        }
    }),
)
def _drift_check(server, args):
    return server.drift_check(
        args["project_id"], args["metric_name"], args["window_a"], args["window_b"], args["threshold_pct"]
    )


@_tool(
    "start_experiment",
    "Start an A/B experiment routing a fraction of requests to a candidate prompt version.",
    _obj(
        {
            "project_id": _ID,
            "prompt_name": _ID,
            "candidate_version": {"type": "integer", "minimum": 1},
            "control_version": {"type": ["integer", "null"], "minimum": 1},
            "allocation_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
            "objective_metric": _ID,
            "min_samples_per_arm": {"type": "integer", "minimum": 1},
            "promotion_delta": {"type": "number", "minimum": 0},
        },
        ["project_id", "prompt_name", "candidate_version"],
        {"project_id": "demo", "prompt_name": "qa-system", "candidate_version": 2, "allocation_fraction": 0.05},
    ),
    _out({"experiment": {"type": "object"}}, ["experiment"], {
        "experiment": {
            "experiment_id": "exp-1", "project_id": "demo", "prompt_name": "qa-system",
            "control_version": 1, "candidate_version": 2, "allocation_fraction": 0.05,
            "objective_metric": "quality", "min_samples_per_arm": 50, "promotion_delta": 0.05,
            "status": "running",
            "control_stats": {"n": 0, "mean": 0.0, "m2": 0.0},
            "candidate_stats": {"n": 0, "mean": 0.0, "m2": 0.0},
        }
    }),
)
def _start_experiment(server, args):
    params = {
        k: args[k]
        for k in (
            "control_version",
            "allocation_fraction",
            "objective_metric",
            "min_samples_per_arm",
            "promotion_delta",
        )
        if args.get(k) is not None
    }
    return server.start_experiment(args["project_id"], args["prompt_name"], args["candidate_version"], **params)


@_tool(
    "record_outcome",
    "Record one [0,1] outcome for an experiment arm (Welford update, logged for replay).",
    _obj(
        {
            "experiment_id": _ID,
            "arm": {"enum": ["control", "candidate"]},
            "score": {"type": "number", "minimum": 0, "maximum": 1},
        },
        ["experiment_id", "arm", "score"],
        {"experiment_id": "exp-1", "arm": "candidate", "score": 0.8},
    ),
    _out(
        {
            "experiment_id": {"type": "string"},
            "arm": {"type": "string"},
            "stats": {"type": "object"},
        },
        ["experiment_id", "arm", "stats"],
        {"experiment_id": "exp-1", "arm": "candidate", "stats": {"n": 1, "mean": 0.8, "m2": 0.0}},
    ),
)
def _record_outcome(server, args):
    return server.record_outcome(args["experiment_id"], args["arm"], args["score"])


@_tool(
    "evaluate_experiment",
    "Apply the promotion rule: continue, promote (emits a proposal), or stop_inferior.",
    _obj({"experiment_id": _ID}, ["experiment_id"], {"experiment_id": "exp-1"}),
    _out(
        {"decision": {"enum": ["continue", "promote", "stop_inferior"]}, "experiment": {"type": "object"}},
        ["decision", "experiment"],
        {"decision": "continue", "experiment": {"experiment_id": "exp-1", "status": "running"}},
    ),
)
def _evaluate_experiment(server, args):
    return server.evaluate_experiment(args["experiment_id"])


@_tool(
    "route_request",
    "Deterministic prompt version + arm for a request key under the binding's experiment.",
    _obj(
        {"project_id": _ID, "prompt_name": _ID, "request_key": {"type": "string", "minLength": 1}},
        ["project_id", "prompt_name", "request_key"],
        {"project_id": "demo", "prompt_name": "qa-system", "request_key": "user-123"},
    ),
    _out(
        {
            "prompt_name": {"type": "string"},
            "version": {"type": "integer"},
            "arm": {"enum": ["control", "candidate"]},
        },
        ["prompt_name", "version", "arm"],
        {"prompt_name": "qa-system", "version": 1, "arm": "control"},
    ),
)
def _route_request(server, args):
    return server.route_request(args["project_id"], args["prompt_name"], args["request_key"])


@_tool(
    "set_agent_state",
    "Pause or resume an agent; paused agents still log traces but are not routed.",
    _obj(
        {
            "project_id": _ID,
            "agent_name": _ID,
            "state": {"enum": ["active", "paused"]},
            "reason": {"type": "string"},
        },
        ["project_id", "agent_name", "state"],
        {"project_id": "demo", "agent_name": "qa-system", "state": "paused", "reason": "metric threshold exceeded"},
    ),
    _out({"agent": {"type": "object"}}, ["agent"], {
        "agent": {"project_id": "demo", "agent_name": "qa-system", "state": "paused",
                  "reason": "metric threshold exceeded", "changed_at": 1700000000000}
    }),
)
def _set_agent_state(server, args):
    return server.set_agent_state(
        args["project_id"], args["agent_name"], args["state"], args.get("reason", "")
    )


_RULE_OBJ = {
    "type": "object",
    "properties": {
        "rule_id": _ID,
        "filter": _PREDICATES,
        "window_ms": {"type": "integer", "minimum": 1},
        "trigger": {"type": "object"},
        "action": {"enum": ["alert", "propose_prompt_change", "propose_experiment"]},
        "cooldown_ms": {"type": "integer", "minimum": 0},
        "action_params": {"type": "object"},
    },
    "required": ["rule_id", "window_ms", "trigger"],
}


@_tool(
    "register_rule",
    "Create or replace a monitor rule (windowed trigger over the trace stream).",
    _obj(
        {"project_id": _ID, "rule": _RULE_OBJ},
        ["project_id", "rule"],
        {
            "project_id": "demo",
            "rule": {
                "rule_id": "high-hallucination",
                "filter": [],
                "window_ms": 3600000,
                "trigger": {"aggregate": "mean_of", "metric": "hallucination",
                            "comparator": "ge", "threshold": 0.6, "min_matches": 1},
                "action": "propose_prompt_change",
                "cooldown_ms": 600000,
                "action_params": {"subject": "qa-system"},
            },
        },
    ),
    _out({"rule": {"type": "object"}}, ["rule"], {"rule": {"rule_id": "high-hallucination", "project_id": "demo"}}),
)
def _register_rule(server, args):
    return server.register_rule(args["project_id"], args["rule"])


@_tool(
    "list_proposals",
    "List alerts/proposals, optionally by status and project.",
    _obj(
        {"status": {"enum": ["open", "accepted", "rejected", None]}, "project_id": _OPT_ID},
        [],
        {"status": "open"},
    ),
    _out(
        {"proposals": {"type": "array", "items": {"type": "object"}}},
        ["proposals"],
        {"proposals": [{
            "proposal_id": "prop-1", "source": "monitor_rule", "project_id": "demo",
            "subject": "qa-system", "description": "[alert] ...", "evidence": [],
            "status": "open", "created_at": 1700000000000, "resolution_note": None,
        }]},
    ),
)
def _list_proposals(server, args):
    return server.list_proposals(args.get("status"), args.get("project_id"))


@_tool(
    "resolve_proposal",
    "Accept or reject an open proposal (open -> accepted|rejected only).",
    _obj(
        {
            "proposal_id": _ID,
            "resolution": {"enum": ["accepted", "rejected"]},
            "note": {"type": "string"},
        },
        ["proposal_id", "resolution"],
        {"proposal_id": "prop-1", "resolution": "accepted", "note": "fixed in v3"},
    ),
    _out({"proposal": {"type": "object"}}, ["proposal"], {
        "proposal": {"proposal_id": "prop-1", "status": "accepted"}
    }),
)
def _resolve_proposal(server, args):
    return server.resolve_proposal(args["proposal_id"], args["resolution"], args.get("note", ""))


def list_tools() -> list[dict]:
    """All tool descriptors in stable (lexicographic) order."""
    return [TOOL_DESCRIPTORS[name] for name in sorted(TOOL_DESCRIPTORS)]


def call_tool(server, name: str, arguments: Any) -> dict:
    """Validate arguments and dispatch to the server operation."""
    descriptor = TOOL_DESCRIPTORS.get(name)
    if descriptor is None:
        raise ToolError(JSONRPC_METHOD_NOT_FOUND, f"unknown tool {name!r}")
    if arguments is None:
        arguments = {}
    if not isinstance(arguments, dict):
        raise ToolError(JSONRPC_INVALID_PARAMS, "arguments must be an object")
    try:
        jsonschema.validate(arguments, descriptor["input_schema"])
    except jsonschema.ValidationError as exc:
        raise ToolError(JSONRPC_INVALID_PARAMS, f"invalid params: {exc.message}") from exc
    try:
        return _HANDLERS[name](server, arguments)
    except AideError as exc:
        raise ToolError(JSONRPC_APPLICATION_ERROR, exc.message, data=exc.to_wire()) from exc
