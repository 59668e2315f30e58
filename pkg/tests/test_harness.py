import httpx
import pytest
from pydantic import ValidationError

from webmall_bench.agents import Interface, PolicySettings, read_transcript
from webmall_bench.cli import SCRIPTS_DIR
from webmall_bench.config import EndpointConfig
from webmall_bench.crawler import crawl_mall, rag_documents
from webmall_bench.errors import ConfigError, PolicyError
from webmall_bench.evaluation import aggregate, report_without_runtime
from webmall_bench.harness import Harness, RunConfig, parse_policy_option, results_by_interface, script_file
from webmall_bench.policies import LiveChatPolicy
from webmall_bench.search_index import index_docs


@pytest.fixture
def rag_index(client, catalog):
    return index_docs(rag_documents(crawl_mall(client, catalog.shops), catalog))


def _harness(client, catalog, tasks, pricing, rag_index, out_dir, **kwargs):
    config = RunConfig(policy=parse_policy_option(f"script:{SCRIPTS_DIR}"), out_dir=out_dir, **kwargs)
    return Harness(config, catalog.shops, client, tasks, pricing, rag_index)


def test_golden_scripts_complete_every_task(client, mall, catalog, tasks, pricing, rag_index, tmp_path):
    results = _harness(client, catalog, tasks, pricing, rag_index, tmp_path).run()
    assert len(results) == 4 * len(tasks)
    failed = [(r.interface, r.task_id) for r in results if r.cr != 1]
    assert failed == []
    assert all(r.error is None for r in results)
    assert [r.interface for r in results[:len(tasks)]] == ["html"] * len(tasks)
    for interface, group in results_by_interface(results).items():
        assert [r.task_id for r in group] == [t.task_id for t in tasks]
        assert all(r.input_tokens > 0 for r in group)
    path = tmp_path / "transcripts" / "nlweb" / "transactional-02.jsonl"
    transcript = read_transcript(path)
    assert transcript.done and transcript.finished
    assert mall.store.session_count() == 0


def test_transactional_runs_are_isolated(client, catalog, tasks, pricing, rag_index, tmp_path):
    transactional = [t for t in tasks if t.is_transactional]
    _harness(client, catalog, transactional, pricing, rag_index, tmp_path, interfaces=[Interface.MCP]).run()
    results = _harness(client, catalog, transactional, pricing, rag_index, tmp_path / "again",
                       interfaces=[Interface.MCP]).run()
    assert [r.cr for r in results] == [1, 1, 1]


def test_reports_are_reproducible(client, catalog, tasks, pricing, rag_index, tmp_path):
    first = _harness(client, catalog, tasks, pricing, rag_index, tmp_path / "a").run()
    second = _harness(client, catalog, tasks, pricing, rag_index, tmp_path / "b", parallel=4).run()
    assert [(r.interface, r.task_id) for r in first] == [(r.interface, r.task_id) for r in second]
    assert report_without_runtime(aggregate(first)) == report_without_runtime(aggregate(second))


def test_rag_needs_an_index(client, catalog, tasks, pricing, tmp_path):
    with pytest.raises(ConfigError):
        _harness(client, catalog, tasks, pricing, None, tmp_path)


def test_policy_options(tmp_path):
    assert parse_policy_option("live", "gpt-5") == PolicySettings(kind="live", model="gpt-5")
    settings = parse_policy_option(f"script:{SCRIPTS_DIR}")
    assert script_file(settings, Interface.RAG) == SCRIPTS_DIR / "rag.jsonl"
    single = tmp_path / "one.jsonl"
    assert script_file(PolicySettings(script_path=str(single)), Interface.MCP) == single
    for option in ("bogus", "script:", ""):
        with pytest.raises(ConfigError):
            parse_policy_option(option)
    with pytest.raises(ValidationError):
        RunConfig(policy=PolicySettings(kind="script", script_path=str(tmp_path / "missing")))


def test_all_live_runs_failing_is_a_policy_error(client, catalog, tasks, pricing, tmp_path):
    def refuse(request):
        raise httpx.ConnectError("refused", request=request)

    endpoint = EndpointConfig(base_url="http://llm.test/v1", api_key="k", model="gpt-4.1", max_retries=1)

    def factory(interface, task):
        return LiveChatPolicy(endpoint, http_client=httpx.AsyncClient(transport=httpx.MockTransport(refuse)))

    retrieval = [t for t in tasks if not t.is_transactional][:2]
    config = RunConfig(interfaces=[Interface.MCP], policy=PolicySettings(kind="live"), out_dir=tmp_path)
    harness = Harness(config, catalog.shops, client, retrieval, pricing, policy_factory=factory)
    with pytest.raises(PolicyError):
        harness.run()
