import json

import httpx
import pytest

from webmall_bench.config import EndpointConfig
from webmall_bench.errors import ConfigError, PolicyError
from webmall_bench.policies import (
    BrowseFill,
    BrowseGoto,
    Finish,
    FunctionSpec,
    LiveChatPolicy,
    PolicyDecision,
    ScriptedPolicy,
    Search,
    ToolCall,
    Usage,
    action_from_call,
    load_scripts,
    parse_action,
)

ENDPOINT = EndpointConfig(base_url="http://llm.test/v1", api_key="secret", model="gpt-4.1", max_retries=3)


def _completion(message, usage=None):
    finish_reason = "tool_calls" if message.get("tool_calls") else "stop"
    return {
        "id": "chatcmpl-1",
        "object": "chat.completion",
        "created": 1700000000,
        "model": "gpt-4.1",
        "choices": [{"index": 0, "finish_reason": finish_reason, "message": message}],
        "usage": usage or {"prompt_tokens": 100, "completion_tokens": 20, "total_tokens": 120},
    }


def _tool_message(name, arguments, call_id="call_1"):
    return {"role": "assistant", "content": None,
            "tool_calls": [{"id": call_id, "type": "function",
                            "function": {"name": name, "arguments": json.dumps(arguments)}}]}


def _policy(handler, endpoint=ENDPOINT, **kwargs):
    http_client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
    return LiveChatPolicy(endpoint, http_client=http_client, **kwargs)


@pytest.mark.parametrize(
    "name,args,expected",
    [
        ("goto", {"url": "http://localhost:9081/"}, BrowseGoto(url="http://localhost:9081/")),
        ("fill_form", {"form": 1, "values": {"quantity": 2}}, BrowseFill(form=1, values={"quantity": "2"})),
        ("search", {"query": "ryzen"}, Search(query="ryzen", k=5)),
        ("finish", {"urls": ["http://a/1"], "done": True}, Finish(answer=["http://a/1"], done=True)),
        ("shop2__find_offers", {"q": "ryzen"}, ToolCall(shop="shop2", tool="find_offers", args={"q": "ryzen"})),
        ("checkout", {"shop": "shop1", "payment": {}}, ToolCall(shop="shop1", tool="checkout", args={"payment": {}})),
        ("add_to_cart", {"url": "http://a/1"}, ToolCall(shop="", tool="add_to_cart", args={"url": "http://a/1"})),
    ],
)
def test_action_from_call(name, args, expected):
    assert action_from_call(name, args) == expected


def test_parse_action_discriminates():
    assert isinstance(parse_action({"kind": "tool", "tool": "x"}), ToolCall)
    with pytest.raises(ValueError):
        parse_action({"kind": "teleport"})


def test_usage_adds():
    assert Usage(input_tokens=1, output_tokens=2) + Usage(input_tokens=10, output_tokens=20) == \
           Usage(input_tokens=11, output_tokens=22)
    with pytest.raises(ValueError):
        Usage(input_tokens=-1)


def test_scripted_policy_finishes_when_exhausted():
    policy = ScriptedPolicy([PolicyDecision(action=Search(query="a"))])
    policy.start("", "", [])
    assert isinstance(policy.decide("").action, Search)
    assert policy.decide("").action == Finish()


def test_scripted_policy_cycles():
    policy = ScriptedPolicy([PolicyDecision(action=Search(query="a")), PolicyDecision(action=Search(query="b"))],
                            cycle=True)
    policy.start("", "", [])
    assert [policy.decide("").action.query for _ in range(5)] == ["a", "b", "a", "b", "a"]


def test_load_scripts_groups_by_task(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(
        '{"task_id": "t1", "action": {"kind": "search", "query": "x"}, "usage": {"input_tokens": 5}}\n'
        '{"task_id": "t2", "action": {"kind": "finish"}}\n'
        '{"task_id": "t1", "action": {"kind": "finish", "answer": ["http://a/1"]}}\n'
    )
    scripts = load_scripts(path)
    assert [d.action.kind for d in scripts["t1"]] == ["search", "finish"]
    assert scripts["t1"][0].usage.input_tokens == 5
    assert ScriptedPolicy.from_file(path, "t3").decisions == []


@pytest.mark.parametrize("line", ['{"task_id": "t"}', "not json", '{"task_id": "t", "action": {"kind": "fly"}}'])
def test_load_scripts_rejects_bad_lines(tmp_path, line):
    path = tmp_path / "s.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(ConfigError):
        load_scripts(path)


def test_bundled_scripts_parse():
    from webmall_bench.cli import SCRIPTS_DIR

    for interface in ("html", "rag", "mcp", "nlweb"):
        scripts = load_scripts(SCRIPTS_DIR / f"{interface}.jsonl")
        assert len(scripts) == 12
        for decisions in scripts.values():
            assert isinstance(decisions[-1].action, Finish)


def test_live_policy_tool_call_and_usage():
    requests = []

    def handler(request):
        requests.append(json.loads(request.content))
        assert request.headers["Authorization"] == "Bearer secret"
        return httpx.Response(200, json=_completion(_tool_message("shop1__search_products", {"query": "ryzen"})))

    policy = _policy(handler, seed=7)
    policy.start("system", "task", [FunctionSpec(name="shop1__search_products")])
    decision = policy.decide("Available tools: ...")
    assert decision.action == ToolCall(shop="shop1", tool="search_products", args={"query": "ryzen"})
    assert decision.usage == Usage(input_tokens=100, output_tokens=20)
    body = requests[0]
    assert body["model"] == "gpt-4.1" and body["seed"] == 7
    assert body["messages"][0]["content"] == "system"
    assert body["messages"][-1]["role"] == "user"
    assert body["messages"][-1]["content"] == "task\n\nAvailable tools: ..."
    assert [tool["function"]["name"] for tool in body["tools"]] == ["shop1__search_products"]

    policy.decide("result text")
    second = requests[1]["messages"]
    assert second[-1]["role"] == "tool"
    assert second[-1]["tool_call_id"] == "call_1"
    assert second[-1]["content"] == "result text"
    assert second[-2]["role"] == "assistant"


def test_live_policy_plain_answer_finishes():
    def handler(request):
        content = "The offers are http://localhost:9081/product/D-001 and http://localhost:9082/product/D-016."
        return httpx.Response(200, json=_completion({"role": "assistant", "content": content},
                                                    {"prompt_tokens": 7, "completion_tokens": 3, "total_tokens": 10}))

    policy = _policy(handler)
    policy.start("s", "t", [])
    decision = policy.decide("")
    assert decision.action.answer == ["http://localhost:9081/product/D-001", "http://localhost:9082/product/D-016"]
    assert decision.action.done
    assert decision.usage == Usage(input_tokens=7, output_tokens=3)


def test_live_policy_counts_tokens_of_rejected_calls():
    responses = [
        _completion(_tool_message("goto", {}, call_id="call_1"),
                    {"prompt_tokens": 50, "completion_tokens": 5, "total_tokens": 55}),
        _completion(_tool_message("goto", {"url": "http://localhost:9081/"}, call_id="call_2"),
                    {"prompt_tokens": 60, "completion_tokens": 6, "total_tokens": 66}),
    ]
    requests = []

    def handler(request):
        requests.append(json.loads(request.content))
        return httpx.Response(200, json=responses[len(requests) - 1])

    policy = _policy(handler)
    policy.start("s", "t", [FunctionSpec(name="goto")])
    decision = policy.decide("")
    assert decision.action == BrowseGoto(url="http://localhost:9081/")
    assert decision.usage == Usage(input_tokens=110, output_tokens=11)
    retry_message = requests[1]["messages"][-1]
    assert retry_message["role"] == "tool" and retry_message["content"].startswith("Error: invalid arguments for goto")


def test_live_policy_gives_up_on_repeated_invalid_calls():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(200, json=_completion(_tool_message("goto", {}, call_id=f"call_{len(attempts)}")))

    policy = _policy(handler)
    policy.start("s", "t", [FunctionSpec(name="goto")])
    with pytest.raises(PolicyError):
        policy.decide("")
    assert len(attempts) == 3


def test_live_policy_retries_then_succeeds():
    attempts = []

    def handler(request):
        attempts.append(1)
        if len(attempts) < 3:
            return httpx.Response(503, text="busy", headers={"retry-after-ms": "1"})
        return httpx.Response(200, json=_completion(_tool_message("finish", {"urls": []})))

    policy = _policy(handler)
    policy.start("s", "t", [FunctionSpec(name="finish")])
    assert isinstance(policy.decide("").action, Finish)
    assert len(attempts) == 3


def test_live_policy_gives_up_after_retries():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(500, text="error", headers={"retry-after-ms": "1"})

    policy = _policy(handler)
    policy.start("s", "t", [])
    with pytest.raises(PolicyError):
        policy.decide("")
    assert len(attempts) == 3


@pytest.mark.parametrize(
    "make_response",
    [
        lambda: httpx.Response(200, json={"choices": []}),
        lambda: httpx.Response(200, text="not json"),
    ],
)
def test_live_policy_rejects_malformed_responses(make_response):
    policy = _policy(lambda request: make_response())
    policy.start("s", "t", [])
    with pytest.raises(PolicyError):
        policy.decide("")


def test_live_policy_transport_error():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    policy = _policy(handler, endpoint=ENDPOINT.model_copy(update={"max_retries": 1}))
    policy.start("s", "t", [])
    with pytest.raises(PolicyError):
        policy.decide("")


def test_decide_needs_start():
    with pytest.raises(PolicyError):
        _policy(lambda request: httpx.Response(500)).decide("")


def test_function_spec_tool_definition():
    spec = FunctionSpec(name="goto", description="Open a URL",
                        parameters={"type": "object", "properties": {"url": {"type": "string"}}})
    definition = spec.to_tool_definition()
    assert definition.name == "goto"
    assert definition.description == "Open a URL"
    assert definition.parameters_json_schema["properties"] == {"url": {"type": "string"}}


@pytest.mark.live
def test_live_endpoint_smoke():
    import os

    from webmall_bench.config import llm_endpoint

    if not os.getenv("LLM_BASE_URL"):
        pytest.skip("LLM_BASE_URL not set")
    policy = LiveChatPolicy(llm_endpoint())
    policy.start("Answer by calling finish.", "Finish with no URLs.",
                 [FunctionSpec(name="finish", parameters={"type": "object", "properties": {}})])
    decision = policy.decide("")
    assert decision.usage.input_tokens > 0
