from __future__ import annotations

import pytest

from aide.cli import (
    EXIT_GATE_FAIL,
    EXIT_GATE_INSUFFICIENT,
    EXIT_OK,
    EXIT_SERVER_ERROR,
    EXIT_UNAVAILABLE,
    EXIT_USAGE,
    main,
)
from aide.wire import canonical_json, decode_json

from conftest import AUTH, make_trace_record
from test_gate import log_run


@pytest.fixture
def cli(http_server, capsys):
    base, server = http_server
    addr = base.removeprefix("http://")

    def run(*argv, expect=EXIT_OK):
        code = main([*argv, "--addr", addr, "--key", "test-key"])
        captured = capsys.readouterr()
        assert code == expect, f"exit {code} != {expect}; stderr: {captured.err}"
        return captured

    return run, server


def test_count_empty_project(cli):
    run, _ = cli
    out = run("traces", "count", "--project", "demo")
    assert out.out.strip() == "0"


def test_count_after_ingest(cli):
    run, server = cli
    for _ in range(3):
        server.log_trace("demo", make_trace_record())
    out = run("traces", "count", "--project", "demo")
    assert out.out.strip() == "3"


def test_search_and_show(cli):
    run, server = cli
    server.log_trace("demo", make_trace_record(trace_id="t-7", scores={"q": 0.8}, feedback=-1))
    out = run("traces", "search", "--project", "demo",
              "--filter", '[{"field": "feedback", "op": "eq", "value": -1}]')
    assert "t-7" in out.out
    out = run("traces", "show", "t-7", "--project", "demo")
    assert '"trace_id": "t-7"' in out.out


def test_json_flag_emits_canonical_bytes(cli, http_server):
    import requests

    run, server = cli
    base, _ = http_server
    server.save_prompt("qa-system", "v1")
    server.save_prompt("qa-system", "v2")
    out = run("prompts", "get", "qa-system", "--version", "2", "--json")
    http_body = requests.get(f"{base}/v1/prompts/qa-system?version=2", headers=AUTH, timeout=10).content
    assert out.out.encode() == http_body + b"\n"


def test_prompts_save_activate_rollback(cli):
    run, server = cli
    run("prompts", "save", "qa", "--template", "v1 body")
    run("prompts", "save", "qa", "--template", "v2 body", "--expected-latest", "1")
    run("prompts", "activate", "qa", "--project", "demo", "--version", "1")
    run("prompts", "activate", "qa", "--project", "demo", "--version", "2")
    out = run("prompts", "rollback", "qa", "--project", "demo")
    assert "active: v1" in out.out
    out = run("prompts", "list", "--project", "demo")
    assert "qa" in out.out


def test_gate_exit_codes(cli):
    run, server = cli
    for i in range(10):
        log_run(server, f"base-{i}", [0.90] * 4)
        server.summarize_run("demo", f"base-{i}")

    log_run(server, "ci-17", [0.80] * 4)
    out = run("gate", "evaluate", "--project", "demo", "--run", "ci-17",
              "--metric", "relevance", expect=EXIT_GATE_FAIL)
    assert "FAIL" in out.out
    assert "relative_drop" in out.out

    log_run(server, "ci-18", [0.85] * 4)
    out = run("gate", "evaluate", "--project", "demo", "--run", "ci-18",
              "--metric", "relevance", "--threshold", "0.10", expect=EXIT_OK)
    assert "PASS" in out.out


def test_gate_insufficient_data_exit_2(cli):
    run, server = cli
    log_run(server, "solo", [0.9] * 2)
    run("gate", "evaluate", "--project", "demo", "--run", "solo",
        "--metric", "relevance", expect=EXIT_GATE_INSUFFICIENT)


def test_experiments_lifecycle(cli):
    run, server = cli
    server.save_prompt("qa", "v1")
    server.save_prompt("qa", "v2")
    server.activate_prompt("demo", "qa", 1)
    out = run("experiments", "start", "--project", "demo", "--prompt", "qa",
              "--candidate", "2", "--epsilon", "0.25")
    experiment_id = out.out.split()[-1]
    out = run("experiments", "status", experiment_id)
    assert "running" in out.out
    out = run("experiments", "stop", experiment_id)
    assert "stopped" in out.out


def test_rules_and_proposals(cli):
    run, server = cli
    rule = {
        "window_ms": 3_600_000,
        "trigger": {"aggregate": "count", "comparator": "ge", "threshold": 1, "min_matches": 1},
        "action": "alert",
        "cooldown_ms": 0,
    }
    run("rules", "put", "watch", "--project", "demo", "--rule", canonical_json(rule).decode())
    out = run("rules", "list", "--project", "demo")
    assert "watch" in out.out

    server.log_trace("demo", make_trace_record(start_time=int(__import__("time").time() * 1000) - 1000))
    server.monitor.tick("demo", "watch")
    out = run("proposals", "list", "--status", "open")
    assert "watch" in out.out
    proposal_id = out.out.split()[0]
    out = run("proposals", "resolve", proposal_id, "--resolution", "accepted", "--note", "ok")
    assert "accepted" in out.out


def test_metrics_table(cli):
    run, server = cli
    server.log_trace("demo", make_trace_record(start_time=1_000_000, latency_ms=900, scores={"q": 0.7}))
    out = run("metrics", "--project", "demo", "--from", "1000000", "--to", "1001000", "--bucket", "1000")
    assert "q=0.700" in out.out
    assert "900" in out.out


def test_usage_error_is_64(capsys):
    assert main(["traces", "count"]) == EXIT_USAGE  # missing --project
    assert main(["gate", "evaluate", "--project", "p", "--run", "r"]) == EXIT_USAGE  # no metric


def test_server_unavailable_is_69(capsys):
    code = main(["traces", "count", "--project", "demo", "--addr", "127.0.0.1:1", "--key", "k"])
    assert code == EXIT_UNAVAILABLE
    assert "unavailable" in capsys.readouterr().err


def test_server_error_exit_70(http_server, capsys):
    base, _ = http_server
    addr = base.removeprefix("http://")
    code = main(["prompts", "get", "ghost", "--addr", addr, "--key", "test-key"])
    assert code == EXIT_SERVER_ERROR
    assert "UnknownPrompt" in capsys.readouterr().err


def test_replay_reads_log_directly(tmp_path, capsys):
    from conftest import new_server

    server = new_server(tmp_path / "data")
    seqs = [server.log_trace("demo", make_trace_record())["seq"] for _ in range(3)]
    server.close()

    code = main(["replay", "--data-dir", str(tmp_path / "data"), "--from-seq", str(seqs[0])])
    assert code == EXIT_OK
    lines = [decode_json(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [line["seq"] for line in lines] == seqs[1:]
    assert all(line["kind"] == "trace" for line in lines)
