"""Operator CLI: a thin client over the HTTP API.

No business logic lives here; every command maps to one HTTP call (except
`replay`, which reads the record log directly). Exit codes are a total
function of the response class:

    0   success (gate: verdict passed)
    1   gate verdict failed
    2   gate passed only via the insufficient-data rule
    64  usage error
    69  server unreachable
    70  server-side error (message on stderr)

`--json` prints the server's canonical response bytes verbatim, so command
output can be piped back into write commands or diffed against fixtures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
import urllib.parse
import urllib.request

from .wire import canonical_json, decode_json

EXIT_OK = 0
EXIT_GATE_FAIL = 1
EXIT_GATE_INSUFFICIENT = 2
EXIT_USAGE = 64
EXIT_UNAVAILABLE = 69
EXIT_SERVER_ERROR = 70

DEFAULT_ADDR = "127.0.0.1:7465"


class UsageError(Exception):
    pass


class ServerUnavailable(Exception):
    pass


class ServerSideError(Exception):
    def __init__(self, status: int, body: dict | None):
        self.status = status
        self.body = body or {}
        error = self.body.get("error", {})
        super().__init__(f"{error.get('kind', 'Error')}: {error.get('message', status)}")


class Client:
    def __init__(self, addr: str, api_key: str | None):
        self.base = addr if addr.startswith("http") else f"http://{addr}"
        self.api_key = api_key

    def request(self, method: str, path: str, params: dict | None = None, body=None) -> bytes:
        url = self.base + path
        if params:
            url += "?" + urllib.parse.urlencode(params)
        data = canonical_json(body) if body is not None else None
        request = urllib.request.Request(url, data=data, method=method)
        request.add_header("Content-Type", "application/json")
        if self.api_key:
            request.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(request, timeout=30) as response:
                return response.read()
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            try:
                parsed = decode_json(raw)
            except ValueError:
                parsed = {"error": {"kind": "HTTPError", "message": raw.decode(errors="replace")}}
            raise ServerSideError(exc.code, parsed) from exc
        except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
            raise ServerUnavailable(str(exc)) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--addr", help="server host:port (default AIDE_HTTP_ADDR)")
    sub.add_argument("--key", help="bearer token (default AIDE_API_KEY)")
    sub.add_argument("--json", action="store_true", help="print the canonical wire response")


def build_parser() -> _Parser:
    parser = _Parser(prog="aide", description="Client for the telemetry/prompt/control server.")
    commands = parser.add_subparsers(dest="command", required=True)

    traces = commands.add_parser("traces", help="search, count, and inspect traces")
    traces_sub = traces.add_subparsers(dest="action", required=True)

    p = traces_sub.add_parser("search")
    p.add_argument("--project", required=True)
    p.add_argument("--filter", help="JSON list of predicates")
    p.add_argument("--from", dest="time_from", type=int)
    p.add_argument("--to", dest="time_to", type=int)
    p.add_argument("--order", help="field:asc|desc (default start_time:desc)")
    p.add_argument("--limit", type=int)
    p.add_argument("--cursor")
    _common(p)

    p = traces_sub.add_parser("count")
    p.add_argument("--project", required=True)
    p.add_argument("--from", dest="time_from", type=int)
    p.add_argument("--to", dest="time_to", type=int)
    _common(p)

    p = traces_sub.add_parser("latest")
    p.add_argument("--project", required=True)
    p.add_argument("--filter", help="JSON list of predicates")
    _common(p)

    p = traces_sub.add_parser("show")
    p.add_argument("trace_id")
    p.add_argument("--project", required=True)
    _common(p)

    p = commands.add_parser("metrics", help="time-bucketed aggregate report")
    p.add_argument("--project", required=True)
    p.add_argument("--from", dest="time_from", type=int, required=True)
    p.add_argument("--to", dest="time_to", type=int, required=True)
    p.add_argument("--bucket", type=int, default=60_000)
    _common(p)

    prompts = commands.add_parser("prompts", help="prompt registry")
    prompts_sub = prompts.add_subparsers(dest="action", required=True)

    p = prompts_sub.add_parser("save")
    p.add_argument("name")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--template")
    group.add_argument("--template-file")
    p.add_argument("--metadata", action="append", default=[], help="key=value, repeatable")
    p.add_argument("--expected-latest", type=int)
    p.add_argument("--commit-tag")
    p.add_argument("--created-by", default=os.environ.get("USER", ""))
    _common(p)

    p = prompts_sub.add_parser("get")
    p.add_argument("name")
    p.add_argument("--version", type=int)
    _common(p)

    p = prompts_sub.add_parser("list")
    p.add_argument("--project")
    _common(p)

    p = prompts_sub.add_parser("activate")
    p.add_argument("name")
    p.add_argument("--project", required=True)
    p.add_argument("--version", type=int, required=True)
    _common(p)

    p = prompts_sub.add_parser("rollback")
    p.add_argument("name")
    p.add_argument("--project", required=True)
    _common(p)

    gate = commands.add_parser("gate", help="CI regression gate")
    gate_sub = gate.add_subparsers(dest="action", required=True)
    p = gate_sub.add_parser("evaluate")
    p.add_argument("--project", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--metric", action="append", default=[], help="metric name, repeatable")
    p.add_argument("--threshold", type=float, help="relative drop threshold (fraction)")
    p.add_argument("--window", type=int, help="baseline window (runs)")
    p.add_argument("--k-sigma", type=float)
    p.add_argument("--min-baseline", type=int)
    p.add_argument("--direction", choices=["higher_is_better", "lower_is_better"])
    p.add_argument("--configs-json", help="full JSON list of gate configs (overrides flags)")
    p.add_argument("--commit-tag")
    _common(p)

    experiments = commands.add_parser("experiments", help="A/B prompt experiments")
    exp_sub = experiments.add_subparsers(dest="action", required=True)
    p = exp_sub.add_parser("start")
    p.add_argument("--project", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--candidate", type=int, required=True)
    p.add_argument("--control", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--metric")
    p.add_argument("--floor", type=int)
    p.add_argument("--delta", type=float)
    _common(p)
    p = exp_sub.add_parser("stop")
    p.add_argument("experiment_id")
    _common(p)
    p = exp_sub.add_parser("status")
    p.add_argument("experiment_id")
    _common(p)

    rules = commands.add_parser("rules", help="monitor rules")
    rules_sub = rules.add_subparsers(dest="action", required=True)
    p = rules_sub.add_parser("put")
    p.add_argument("rule_id")
    p.add_argument("--project", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--rule", help="rule JSON")
    group.add_argument("--rule-file")
    _common(p)
    p = rules_sub.add_parser("list")
    p.add_argument("--project", required=True)
    _common(p)

    proposals = commands.add_parser("proposals", help="alerts and proposals")
    prop_sub = proposals.add_subparsers(dest="action", required=True)
    p = prop_sub.add_parser("list")
    p.add_argument("--status", choices=["open", "accepted", "rejected"])
    p.add_argument("--project")
    _common(p)
    p = prop_sub.add_parser("resolve")
    p.add_argument("proposal_id")
    p.add_argument("--resolution", choices=["accepted", "rejected"], required=True)
    p.add_argument("--note", default="")
    _common(p)

    p = commands.add_parser("replay", help="read events straight from the log (no server)")
    p.add_argument("--data-dir", help="storage root (default AIDE_DATA_DIR)")
    p.add_argument("--from-seq", type=int, default=0)
    p.add_argument("--project")
    p.add_argument("--kind")
    _common(p)

    return parser


def _client(args) -> Client:
    addr = args.addr or os.environ.get("AIDE_HTTP_ADDR", DEFAULT_ADDR)
    key = args.key or os.environ.get("AIDE_API_KEY")
    return Client(addr, key)


def _emit(args, raw: bytes, human) -> None:
    if args.json:
        sys.stdout.buffer.write(raw)
        sys.stdout.buffer.write(b"\n")
    else:
        human(decode_json(raw))


def _parse_json_arg(name: str, raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--{name} must be valid JSON: {exc}") from exc


def _format_ts(ms: int) -> str:
    from datetime import datetime, timezone

    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


def _print_trace_rows(traces: list[dict]) -> None:
    print(f"{'trace_id':<34} {'start (UTC)':<20} {'ms':>7} {'fb':>3}  scores")
    for t in traces:
        scores = " ".join(f"{k}={v:.3g}" for k, v in sorted(t["scores"].items()))
        feedback = {None: "-", -1: "-1", 0: "0", 1: "+1"}[t["feedback"]]
        latency = t["end_time"] - t["start_time"]
        print(f"{t['trace_id']:<34} {_format_ts(t['start_time']):<20} {latency:>7} {feedback:>3}  {scores}")


# -- command handlers --------------------------------------------------------


def _cmd_traces(args, client: Client) -> int:
    if args.action == "search":
        query: dict = {}
        if args.filter:
            query["predicates"] = _parse_json_arg("filter", args.filter)
        if args.time_from is not None or args.time_to is not None:
            if args.time_from is None or args.time_to is None:
                raise UsageError("--from and --to must be given together")
            query["time_range"] = [args.time_from, args.time_to]
        if args.order:
            field, _, direction = args.order.partition(":")
            query["order_by"] = [field, direction or "desc"]
        if args.limit is not None:
            query["limit"] = args.limit
        if args.cursor:
            query["cursor"] = args.cursor
        raw = client.request(
            "GET", f"/v1/projects/{args.project}/traces", {"filter": json.dumps(query)}
        )

        def human(result):
            _print_trace_rows(result["traces"])
            if result["next_cursor"]:
                print(f"next cursor: {result['next_cursor']}")

        _emit(args, raw, human)
    elif args.action == "count":
        params = {}
        if args.time_from is not None and args.time_to is not None:
            params = {"from": args.time_from, "to": args.time_to}
        raw = client.request("GET", f"/v1/projects/{args.project}/traces/count", params)
        _emit(args, raw, lambda result: print(result["count"]))
    elif args.action == "latest":
        params = {}
        if args.filter:
            params["filter"] = json.dumps(_parse_json_arg("filter", args.filter))
        raw = client.request("GET", f"/v1/projects/{args.project}/traces/latest", params)

        def human(result):
            if result["trace"] is None:
                print("no matching trace")
            else:
                _print_trace_rows([result["trace"]])
                print(f"output: {result['trace']['output']!r}")

        _emit(args, raw, human)
    else:  # show
        raw = client.request("GET", f"/v1/projects/{args.project}/traces/{args.trace_id}")
        _emit(args, raw, lambda result: print(json.dumps(result["trace"], indent=2, ensure_ascii=False)))
    return EXIT_OK


def _cmd_metrics(args, client: Client) -> int:
    raw = client.request(
        "GET",
        f"/v1/projects/{args.project}/metrics",
        {"from": args.time_from, "to": args.time_to, "bucket": args.bucket},
    )

    def human(report):
        print(f"{'bucket (UTC)':<20} {'n':>5} {'lat.mean':>9} {'p50':>6} {'p95':>6}  scores")
        for bucket in report["buckets"]:
            lat = bucket["latency_ms"]
            mean = f"{lat['mean']:.1f}" if lat["mean"] is not None else "-"
            p50 = lat["p50"] if lat["p50"] is not None else "-"
            p95 = lat["p95"] if lat["p95"] is not None else "-"
            scores = " ".join(f"{k}={v:.3f}" for k, v in bucket["scores"].items())
            print(
                f"{_format_ts(bucket['bucket_start']):<20} {bucket['trace_count']:>5} "
                f"{mean:>9} {p50:>6} {p95:>6}  {scores}"
            )

    _emit(args, raw, human)
    return EXIT_OK


def _cmd_prompts(args, client: Client) -> int:
    if args.action == "save":
        template = args.template
        if args.template_file:
            with open(args.template_file, encoding="utf-8") as fh:
                template = fh.read()
        metadata = {}
        for pair in args.metadata:
            key, sep, value = pair.partition("=")
            if not sep:
                raise UsageError(f"--metadata needs key=value, got {pair!r}")
            metadata[key] = value
        body = {"template": template, "metadata": metadata, "created_by": args.created_by}
        if args.expected_latest is not None:
            body["expected_latest"] = args.expected_latest
        if args.commit_tag:
            body["commit_tag"] = args.commit_tag
        raw = client.request("PUT", f"/v1/prompts/{args.name}", body=body)
        _emit(args, raw, lambda r: print(f"saved {r['prompt']['prompt_name']} v{r['prompt']['version']}"))
    elif args.action == "get":
        params = {"version": args.version} if args.version else None
        raw = client.request("GET", f"/v1/prompts/{args.name}", params)

        def human(result):
            prompt = result["prompt"]
            print(f"# {prompt['prompt_name']} v{prompt['version']}"
                  + (f" (tag {prompt['commit_tag']})" if prompt["commit_tag"] else ""))
            print(prompt["template"])

        _emit(args, raw, human)
    elif args.action == "list":
        params = {"project": args.project} if args.project else None
        raw = client.request("GET", "/v1/prompts", params)

        def human(result):
            print(f"{'name':<32} {'latest':>7} {'active':>7}")
            for summary in result["prompts"]:
                active = summary["active_version"] if summary["active_version"] is not None else "-"
                print(f"{summary['prompt_name']:<32} {summary['latest_version']:>7} {active:>7}")

        _emit(args, raw, human)
    elif args.action == "activate":
        raw = client.request(
            "POST",
            f"/v1/projects/{args.project}/bindings/{args.name}:activate",
            body={"version": args.version},
        )
        _emit(args, raw, lambda r: print(f"active: v{r['binding']['active_version']}"))
    else:  # rollback
        raw = client.request("POST", f"/v1/projects/{args.project}/bindings/{args.name}:rollback", body={})
        _emit(args, raw, lambda r: print(f"active: v{r['binding']['active_version']}"))
    return EXIT_OK


def _cmd_gate(args, client: Client) -> int:
    if args.configs_json:
        configs = _parse_json_arg("configs-json", args.configs_json)
    else:
        if not args.metric:
            raise UsageError("gate evaluate needs --metric (repeatable) or --configs-json")
        config = {}
        if args.threshold is not None:
            config["relative_drop_threshold"] = args.threshold
        if args.window is not None:
            config["baseline_window"] = args.window
        if args.k_sigma is not None:
            config["k_sigma"] = args.k_sigma
        if args.min_baseline is not None:
            config["min_baseline_runs"] = args.min_baseline
        if args.direction:
            config["direction"] = args.direction
        configs = [{"metric_name": m, **config} for m in args.metric]
    body = {"configs": configs}
    if args.commit_tag:
        body["commit_tag"] = args.commit_tag
    raw = client.request("POST", f"/v1/projects/{args.project}/gates/{args.run}:evaluate", body=body)
    verdict = decode_json(raw)["verdict"]

    def human(result):
        v = result["verdict"]
        print(f"run {v['run_id']}: {'PASS' if v['pass'] else 'FAIL'}")
        print(f"{'metric':<20} {'current':>9} {'baseline':>9} {'std':>9} {'change':>8}  rule")
        for d in v["details"]:
            fmt = lambda x, spec="9.4f": ("-".rjust(int(spec.split('.')[0])) if x is None else f"{x:{spec}}")
            change = "-" if d["relative_change"] is None else f"{d['relative_change'] * 100:+.1f}%"
            print(
                f"{d['metric_name']:<20} {fmt(d['current_mean'])} {fmt(d['baseline_mean'])} "
                f"{fmt(d['baseline_std'])} {change:>8}  {d['rule_triggered']}"
            )

    _emit(args, raw, human)
    if not verdict["pass"]:
        return EXIT_GATE_FAIL
    if any(d["rule_triggered"] == "insufficient_data_pass" for d in verdict["details"]):
        return EXIT_GATE_INSUFFICIENT
    return EXIT_OK


def _cmd_experiments(args, client: Client) -> int:
    if args.action == "start":
        body = {"prompt_name": args.prompt, "candidate_version": args.candidate}
        if args.control is not None:
            body["control_version"] = args.control
        if args.epsilon is not None:
            body["allocation_fraction"] = args.epsilon
        if args.metric:
            body["objective_metric"] = args.metric
        if args.floor is not None:
            body["min_samples_per_arm"] = args.floor
        if args.delta is not None:
            body["promotion_delta"] = args.delta
        raw = client.request("POST", f"/v1/projects/{args.project}/experiments", body=body)
        _emit(args, raw, lambda r: print(f"started {r['experiment']['experiment_id']}"))
    elif args.action == "stop":
        raw = client.request("POST", f"/v1/experiments/{args.experiment_id}:stop", body={})
        _emit(args, raw, lambda r: print(f"stopped; status={r['experiment']['status']}"))
    else:  # status
        raw = client.request("GET", f"/v1/experiments/{args.experiment_id}")

        def human(result):
            e = result["experiment"]
            print(f"{e['experiment_id']}: {e['status']}  {e['prompt_name']} "
                  f"v{e['control_version']} vs v{e['candidate_version']} (eps={e['allocation_fraction']})")
            for arm in ("control", "candidate"):
                stats = e[f"{arm}_stats"]
                print(f"  {arm:<10} n={stats['n']:<6} mean={stats['mean']:.4f}")

        _emit(args, raw, human)
    return EXIT_OK


def _cmd_rules(args, client: Client) -> int:
    if args.action == "put":
        raw_rule = args.rule
        if args.rule_file:
            with open(args.rule_file, encoding="utf-8") as fh:
                raw_rule = fh.read()
        rule = _parse_json_arg("rule", raw_rule)
        raw = client.request("PUT", f"/v1/projects/{args.project}/rules/{args.rule_id}", body=rule)
        _emit(args, raw, lambda r: print(f"rule {r['rule']['rule_id']} registered"))
    else:
        raw = client.request("GET", f"/v1/projects/{args.project}/rules")

        def human(result):
            for rule in result["rules"]:
                flag = " (disabled)" if rule.get("disabled") else ""
                print(f"{rule['rule_id']}: {rule['action']} window={rule['window_ms']}ms{flag}")

        _emit(args, raw, human)
    return EXIT_OK


def _cmd_proposals(args, client: Client) -> int:
    if args.action == "list":
        params = {}
        if args.status:
            params["status"] = args.status
        if args.project:
            params["project"] = args.project
        raw = client.request("GET", "/v1/proposals", params)

        def human(result):
            for proposal in result["proposals"]:
                print(f"{proposal['proposal_id']} [{proposal['status']}] {proposal['subject']}: "
                      f"{proposal['description']} ({len(proposal['evidence'])} evidence traces)")

        _emit(args, raw, human)
    else:
        raw = client.request(
            "POST",
            f"/v1/proposals/{args.proposal_id}:resolve",
            body={"resolution": args.resolution, "note": args.note},
        )
        _emit(args, raw, lambda r: print(f"{r['proposal']['proposal_id']}: {r['proposal']['status']}"))
    return EXIT_OK


def _cmd_replay(args) -> int:
    from .storage import read_log_records

    data_dir = args.data_dir or os.environ.get("AIDE_DATA_DIR")
    if not data_dir:
        raise UsageError("replay needs --data-dir or AIDE_DATA_DIR")
    for record in read_log_records(data_dir, from_seq=args.from_seq):
        if args.project and record.dir_key != args.project:
            continue
        if args.kind and record.kind != args.kind:
            continue
        line = canonical_json({"seq": record.seq, "kind": record.kind, "payload": record.payload})
        sys.stdout.buffer.write(line)
        sys.stdout.buffer.write(b"\n")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "replay":
            return _cmd_replay(args)
        client = _client(args)
        handler = {
            "traces": _cmd_traces,
            "metrics": _cmd_metrics,
            "prompts": _cmd_prompts,
            "gate": _cmd_gate,
            "experiments": _cmd_experiments,
            "rules": _cmd_rules,
            "proposals": _cmd_proposals,
        }[args.command]
        return handler(args, client)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ServerUnavailable as exc:
        print(f"server unavailable: {exc}", file=sys.stderr)
        return EXIT_UNAVAILABLE
    except ServerSideError as exc:
        print(f"server error: {exc}", file=sys.stderr)
        return EXIT_SERVER_ERROR


if __name__ == "__main__":
    sys.exit(main())
