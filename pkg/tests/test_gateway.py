import json
from itertools import cycle, islice

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from samloop.audit import AuditLog, load_audit
from samloop.errors import (
    AllProvidersFailed,
    DuplicateName,
    ForbiddenCaller,
    GatewayError,
    NoUsableModel,
    ProviderError,
    RateLimited,
)
from samloop.gateway import (
    ChatCompletionsProvider,
    CompletionRequest,
    CompletionResponse,
    Gateway,
    ModelSpec,
    ScriptedBackend,
)


class Sink:
    def __init__(self):
        self.records = []

    def record_call(self, **record):
        self.records.append(record)
        return len(self.records)


class Flaky:
    """Provider that fails for some model names and answers for the rest."""

    def __init__(self, failing=(), error=ProviderError):
        self.failing = set(failing)
        self.error = error
        self.seen = []

    def complete(self, model, request):
        self.seen.append(model.name)
        if model.name in self.failing:
            raise self.error(f"{model.name} down")
        return CompletionResponse(f"from {model.name}", usage={"prompt_tokens": 1000, "completion_tokens": 500})


def spec(name, rank=1, roles=("work", "control"), **kw):
    return ModelSpec(name, kw.pop("provider", "p"), rank, frozenset(roles), **kw)


def req(role="work", phase="work", text="hi"):
    return CompletionRequest(role, phase, [{"role": "user", "content": text}])


def gateway(*specs, provider=None):
    gw = Gateway({"p": provider or Flaky()})
    for s in specs:
        gw.register_model(s)
    return gw


def test_round_robin_within_rank():
    gw = gateway(spec("A"), spec("B"), spec("C", rank=2))
    picks = [gw.select_model("work", 1).name for _ in range(4)]
    # oracle: plain rotation over the rank-1 bucket in registration order
    assert picks == list(islice(cycle(["A", "B"]), 4))


@given(k=st.integers(1, 5), n=st.integers(1, 6))
def test_round_robin_is_fair(k, n):
    gw = gateway(*(spec(f"m{i}") for i in range(k)))
    picks = [gw.select_model("work", 1).name for _ in range(n * k)]
    assert all(picks.count(f"m{i}") == n for i in range(k))


def test_cursor_is_per_role():
    gw = gateway(spec("A"), spec("B"))
    assert gw.select_model("work", 1).name == "A"
    assert gw.select_model("control", 1).name == "A"
    assert gw.select_model("work", 1).name == "B"


def test_fallback_prefers_higher_then_lower_rank():
    gw = gateway(spec("low", rank=1), spec("high", rank=3))
    assert gw.rank_order(2) == [2, 3, 1]
    assert gw.select_model("work", 2).name == "high"
    gw.model("high").enabled = False
    assert gw.select_model("work", 2).name == "low"
    gw.model("low").enabled = False
    with pytest.raises(NoUsableModel):
        gw.select_model("work", 2)


def test_roles_are_respected():
    gw = gateway(spec("ctl", roles=("control",)), spec("wrk", roles=("work",)))
    assert {gw.select_model("control", 1).name for _ in range(3)} == {"ctl"}
    assert {gw.select_model("work", 1).name for _ in range(3)} == {"wrk"}


def test_duplicate_and_bad_specs():
    gw = gateway(spec("A"))
    with pytest.raises(DuplicateName):
        gw.register_model(spec("A"))
    with pytest.raises(ValueError):
        spec("Z", rank=0)
    with pytest.raises(ValueError):
        spec("Z", roles=("boss",))
    with pytest.raises(ValueError):
        CompletionRequest("work", "lunch", [])


def test_budget_charged_from_usage_and_exhaustion_disables():
    gw = gateway(spec("A", price_in=1.0, price_out=2.0, budget=4.0), spec("B"))
    sink = Sink()
    served = [gw.complete(req(), 1, sink).model for _ in range(6)]
    # each call costs 1000/1000*1 + 500/1000*2 = 2.0, so A serves twice
    assert served == ["A", "B", "A", "B", "B", "B"]
    assert gw.model("A").consumed == pytest.approx(4.0)
    assert gw.model("A").enabled is False
    assert [r["cost"] for r in sink.records[:2]] == [2.0, 0.0]


def test_provider_failure_retries_same_rank_alternate():
    flaky = Flaky(failing={"A"})
    gw = gateway(spec("A"), spec("B"), provider=flaky)
    sink = Sink()
    resp = gw.complete(req(), 1, sink)
    assert resp.model == "B" and resp.content == "from B"
    assert flaky.seen == ["A", "B"]
    assert [a["model"] for a in sink.records[0]["attempts"]] == ["A"]


def test_failure_then_rank_fallback_then_give_up():
    flaky = Flaky(failing={"A", "B", "C"}, error=RateLimited)
    gw = gateway(spec("A"), spec("B"), spec("C", rank=2), spec("D", rank=3), provider=flaky)
    sink = Sink()
    with pytest.raises(AllProvidersFailed) as info:
        gw.complete(req(), 1, sink)
    # one same-rank alternate, one rank fallback, then stop (D is never tried)
    assert flaky.seen == ["A", "B", "C"]
    assert len(info.value.attempts) == 3
    assert sink.records[-1]["error"] == "all-providers-failed"


def test_no_usable_model_is_audited():
    gw = gateway(spec("A", enabled=False))
    sink = Sink()
    with pytest.raises(NoUsableModel):
        gw.complete(req(), 1, sink)
    assert sink.records[0]["error"] == "no-usable-model"


def test_complete_requires_audit():
    with pytest.raises(GatewayError):
        gateway(spec("A")).complete(req(), 1, None)


def test_state_export_restore_round_trip():
    gw = gateway(spec("A", budget=3.0, flat_cost=1.0), spec("B"))
    sink = Sink()
    for _ in range(3):
        gw.complete(req(), 1, sink)
    saved = json.loads(json.dumps(gw.export_state()))
    fresh = gateway(spec("A", budget=3.0, flat_cost=1.0), spec("B"))
    fresh.restore_state(saved)
    assert fresh.export_state() == gw.export_state()
    assert [fresh.select_model("work", 1).name for _ in range(3)] == [gw.select_model("work", 1).name for _ in range(3)]


def test_revise_rank_only_by_prescan_or_review(tmp_path):
    gw = gateway(spec("A", rank=1), spec("B", rank=2), spec("C", rank=4))
    seen = []
    session = gw.session(AuditLog(tmp_path / "a.log", "r"), lambda *a: seen.append(a))
    assert session.rank_bounds("work") == (1, 4)
    for caller in ("work", "final-review", "ui-tool"):
        with pytest.raises(ForbiddenCaller):
            session.revise_rank("work", 2, "why", caller)
    assert session.revise_rank("work", 9, "harder", "review") == 4
    assert session.revise_rank("work", 0, "easier", "pre-scan") == 1
    assert seen == [("work", None, 4, "harder", "review"), ("work", 4, 1, "easier", "pre-scan")]
    assert session.rank_for("work", 3) == 1


def test_session_counts_match_audit(tmp_path):
    gw = Gateway({"s": ScriptedBackend([{"response": {"content": "x"}}])})
    gw.register_model(spec("A", provider="s"))
    log = AuditLog(tmp_path / "a.log", "r")
    session = gw.session(log)
    session.set_context(iteration=4, node="root/1")
    for _ in range(3):
        session.complete(req(), 1)
    records = load_audit(tmp_path / "a.log")
    assert session.calls == log.count == len(records) == 3
    assert {(r["iteration"], r["node"]) for r in records} == {(4, "root/1")}


# -- scripted backend ---------------------------------------------------------


def test_scripted_rules_match_latest_message():
    backend = ScriptedBackend([
        {"phase": "review", "pattern": "^exit code: 0$", "response": {"content": "passed"}},
        {"phase": "review", "once": True, "response": {"content": "first"}},
        {"phase": "review", "model": "B", "response": {"content": "b only"}},
        {"contains": "boom", "response": {"error": "timeout"}},
    ])
    m = spec("A")
    r = CompletionRequest("control", "review", [{"role": "user", "content": "exit code: 0"}, {"role": "user", "content": "other"}])
    assert backend.complete(m, r).content == "first"
    assert backend.complete(m, r).content == "no rule matched"
    assert backend.complete(spec("B"), r).content == "b only"
    r.messages.append({"role": "tool", "content": "exit code: 0\nfine"})
    assert backend.complete(m, r).content == "passed"
    with pytest.raises(Exception) as info:
        backend.complete(m, req(text="boom"))
    assert info.value.kind == "timeout"


def test_scripted_tool_calls_and_file(tmp_path):
    path = tmp_path / "rules.yaml"
    path.write_text("rules:\n  - response: {tool_calls: [{name: shell, arguments: {command: ls}}]}\n")
    resp = ScriptedBackend.from_file(path).complete(spec("A"), req())
    assert resp.finish_reason == "tool_calls"
    assert [(c.id, c.name, c.arguments) for c in resp.tool_calls] == [("call-1", "shell", {"command": "ls"})]


# -- HTTP adapter -------------------------------------------------------------


def http_model(**kw):
    return spec("remote", provider="http", base_url="https://llm.test/v1", remote_id="big-1",
                api_key_env="SAMLOOP_TEST_KEY", **kw)


def test_chat_completions_wire_format(monkeypatch):
    monkeypatch.setenv("SAMLOOP_TEST_KEY", "sekrit")
    captured = {}

    def handler(request):
        captured["url"] = str(request.url)
        captured["auth"] = request.headers["authorization"]
        captured["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"content": None, "tool_calls": [
                {"id": "c9", "type": "function", "function": {"name": "shell", "arguments": "{\"command\": \"pwd\"}"}}]},
                "finish_reason": "tool_calls"}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3},
        })

    provider = ChatCompletionsProvider(httpx.Client(transport=httpx.MockTransport(handler)))
    request = CompletionRequest("work", "work", [
        {"role": "user", "content": "go"},
        {"role": "assistant", "content": "", "tool_calls": [{"id": "c1", "name": "shell", "arguments": {"command": "ls"}}]},
        {"role": "tool", "tool_call_id": "c1", "content": "exit code: 0"},
    ], tools=[{"name": "shell", "parameters": {}}])
    resp = provider.complete(http_model(), request)
    assert captured["url"] == "https://llm.test/v1/chat/completions"
    assert captured["auth"] == "Bearer sekrit"
    body = captured["body"]
    assert body["model"] == "big-1"
    assert body["tools"] == [{"type": "function", "function": {"name": "shell", "parameters": {}}}]
    assert body["messages"][1]["tool_calls"][0]["function"] == {"name": "shell", "arguments": "{\"command\": \"ls\"}"}
    assert body["messages"][2]["tool_call_id"] == "c1"
    assert resp.tool_calls[0].arguments == {"command": "pwd"}
    assert resp.usage == {"prompt_tokens": 12, "completion_tokens": 3}


@pytest.mark.parametrize("status,error", [(429, RateLimited), (500, ProviderError)])
def test_chat_completions_http_errors(monkeypatch, status, error):
    monkeypatch.setenv("SAMLOOP_TEST_KEY", "k")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(status, text="nope")))
    with pytest.raises(error):
        ChatCompletionsProvider(client).complete(http_model(), req())


def test_chat_completions_missing_key(monkeypatch):
    monkeypatch.delenv("SAMLOOP_TEST_KEY", raising=False)
    with pytest.raises(ProviderError, match="SAMLOOP_TEST_KEY"):
        ChatCompletionsProvider(httpx.Client()).complete(http_model(), req())


def test_chat_completions_garbage_body(monkeypatch):
    monkeypatch.setenv("SAMLOOP_TEST_KEY", "k")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"choices": []})))
    with pytest.raises(ProviderError, match="unreadable"):
        ChatCompletionsProvider(client).complete(http_model(), req())
