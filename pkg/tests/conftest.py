from __future__ import annotations

import itertools

import pytest

_counter = itertools.count(1)


def make_trace_record(
    project_id: str = "demo",
    trace_id: str | None = None,
    name: str = "run",
    start_time: int = 1_000_000,
    end_time: int | None = None,
    latency_ms: int = 900,
    prompt_tokens: int = 10,
    completion_tokens: int = 20,
    output: str = "",
    scores: dict | None = None,
    feedback: int | None = None,
    tags: list | None = None,
    spans: list | None = None,
    prompt_ref: dict | None = None,
) -> dict:
    """Wire-shaped trace record, as a client would submit it."""
    if trace_id is None:
        trace_id = f"t{next(_counter):06d}"
    if end_time is None:
        end_time = start_time + latency_ms
    return {
        "trace_id": trace_id,
        "project_id": project_id,
        "name": name,
        "start_time": start_time,
        "end_time": end_time,
        "spans": spans or [],
        "prompt_ref": prompt_ref,
        "input": "",
        "output": output,
        "token_usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
        "scores": scores or {},
        "feedback": feedback,
        "tags": tags or [],
    }


def make_span(
    span_id: str = "s1",
    kind: str = "llm_call",
    parent_span: str | None = None,
    start_time: int = 1_000_000,
    end_time: int = 1_000_100,
    error: str | None = None,
) -> dict:
    return {
        "span_id": span_id,
        "parent_span": parent_span,
        "kind": kind,
        "name": span_id,
        "input": "",
        "output": "",
        "start_time": start_time,
        "end_time": end_time,
        "token_usage": None,
        "error": error,
    }


@pytest.fixture
def store(tmp_path):
    from aide.storage import Store

    s = Store(tmp_path / "data", fsync=False)
    yield s
    s.close()


def new_server(data_dir, **overrides):
    from aide.config import ServerConfig
    from aide.server import AideServer

    overrides.setdefault("fsync", False)
    return AideServer(ServerConfig(data_dir=data_dir, **overrides))


@pytest.fixture
def server(tmp_path):
    s = new_server(tmp_path / "data")
    yield s
    s.close()


@pytest.fixture
def http_server(tmp_path):
    """AideServer behind a real HTTP listener on an ephemeral port."""
    from aide.httpd import HttpTransport

    s = new_server(tmp_path / "data", api_key="test-key")
    transport = HttpTransport(s, host="127.0.0.1", port=0)
    transport.start()
    base = f"http://127.0.0.1:{transport.httpd.server_address[1]}"
    yield base, s
    transport.stop()
    s.close()


AUTH = {"Authorization": "Bearer test-key"}


@pytest.fixture
def frozen_clock():
    from aide import clock

    clock.freeze(1_700_000_000_000)
    yield 1_700_000_000_000
    clock.unfreeze()


@pytest.fixture
def deterministic_ids(monkeypatch, frozen_clock):
    """Returns an installer that makes server-generated ids sequential;
    call once per fresh server so id sequences align across servers."""
    import aide.control
    import aide.monitor

    def install():
        counter = itertools.count(1)

        def fake_new_id(prefix=""):
            return f"{prefix}fx{next(counter):04d}"

        monkeypatch.setattr(aide.control, "new_id", fake_new_id)
        monkeypatch.setattr(aide.monitor, "new_id", fake_new_id)

    return install
