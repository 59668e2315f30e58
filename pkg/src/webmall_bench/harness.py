"""
Runs agents over a task set and scores them.

Every task run gets its own run tag (sent as ``X-Run-Id``), so the sessions it
opens are fresh and the state it leaves behind can be fetched on its own from
the admin snapshot endpoint. Once scored, the run's sessions are dropped.
Tasks run in a bounded thread pool.
"""

import logging
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import httpx
from pydantic import BaseModel, Field, field_validator

from webmall_bench.agents import (
    AgentConfig,
    Interface,
    PolicySettings,
    ShopEndpoints,
    Transcript,
    run_agent,
    write_transcript,
)
from webmall_bench.catalog import Shop
from webmall_bench.commerce import StateSnapshot
from webmall_bench.config import admin_token, llm_endpoint
from webmall_bench.errors import ConfigError, NetworkError, PolicyError
from webmall_bench.evaluation import PricingTable, TaskResult, score_task
from webmall_bench.policies import LiveChatPolicy, Policy, ScriptedPolicy
from webmall_bench.search_index import Index
from webmall_bench.tasks import TaskSpec

logger = logging.getLogger(__name__)

ALL_INTERFACES = [Interface.HTML, Interface.RAG, Interface.MCP, Interface.NLWEB]


class RunConfig(BaseModel):
    """Settings of one benchmark run."""

    interfaces: List[Interface] = Field(default_factory=lambda: list(ALL_INTERFACES))
    policy: PolicySettings = Field(default_factory=PolicySettings)
    max_steps: Optional[int] = Field(default=None, ge=1)
    max_search_k: int = Field(default=20, ge=1)
    out_dir: Path = Path("results")
    parallel: int = Field(default=1, ge=1)
    seed: Optional[int] = None

    @field_validator("policy")
    @classmethod
    def script_exists(cls, value: PolicySettings) -> PolicySettings:
        if value.kind == "script":
            if not value.script_path:
                raise ValueError("a scripted policy needs a script path")
            if not Path(value.script_path).exists():
                raise ValueError(f"script path not found: {value.script_path}")
        return value


def parse_policy_option(option: str, model: Optional[str] = None) -> PolicySettings:
    """``live`` or ``script:<path>``; the path is a script file or a directory of ``{interface}.jsonl`` files."""
    if option == "live":
        return PolicySettings(kind="live", model=model)
    if option.startswith("script:") and len(option) > len("script:"):
        return PolicySettings(kind="script", script_path=option[len("script:"):], model=model)
    raise ConfigError(f"invalid policy {option!r}; expected 'live' or 'script:<path>'")


def script_file(settings: PolicySettings, interface: Interface) -> Path:
    path = Path(settings.script_path or "")
    return path / f"{interface.value}.jsonl" if path.is_dir() else path


def fetch_run_snapshot(http: httpx.Client, shop: Shop, run_tag: str) -> StateSnapshot:
    url = f"{shop.base_url.rstrip('/')}/admin/run/{run_tag}/snapshot"
    try:
        response = http.get(url, headers={"X-Admin-Token": admin_token()})
    except httpx.HTTPError as e:
        raise NetworkError(f"cannot fetch state snapshot from {shop.shop_id}: {e}") from e
    if response.status_code != 200:
        raise NetworkError(f"{shop.shop_id} answered HTTP {response.status_code} for the state snapshot")
    return StateSnapshot.model_validate(response.json())


def drop_run_sessions(http: httpx.Client, shop: Shop, run_tag: str) -> int:
    """Ask the mall to forget the sessions of a finished run; returns how many were dropped."""
    url = f"{shop.base_url.rstrip('/')}/admin/run/{run_tag}"
    try:
        response = http.delete(url, headers={"X-Admin-Token": admin_token()})
    except httpx.HTTPError as e:
        raise NetworkError(f"cannot drop the sessions of run {run_tag} on {shop.shop_id}: {e}") from e
    if response.status_code != 200:
        raise NetworkError(f"{shop.shop_id} answered HTTP {response.status_code} when dropping run {run_tag}")
    return response.json()["dropped"]


class Harness:
    """
    Runs every (interface, task) pair of a run configuration and scores it.

    :param config: run settings
    :param shops: the shops the agents talk to
    :param http: client used by agents and for state snapshots
    :param tasks: tasks to run
    :param pricing: token prices
    :param rag_index: crawled index, needed when the RAG interface is run
    :param policy_factory: overrides how a policy is built for a task
    """

    def __init__(
        self,
        config: RunConfig,
        shops: List[Shop],
        http: httpx.Client,
        tasks: List[TaskSpec],
        pricing: PricingTable,
        rag_index: Optional[Index] = None,
        policy_factory: Optional[Callable[[Interface, TaskSpec], Policy]] = None,
    ):
        if Interface.RAG in config.interfaces and rag_index is None:
            raise ConfigError("the RAG interface needs an index; run the index command first")
        self.config = config
        self.shops = shops
        self.http = http
        self.tasks = tasks
        self.pricing = pricing
        self.rag_index = rag_index
        self.policy_factory = policy_factory or self.default_policy

    def default_policy(self, interface: Interface, task: TaskSpec) -> Policy:
        settings = self.config.policy
        if settings.kind == "live":
            return LiveChatPolicy(llm_endpoint(settings.model), seed=self.config.seed)
        return ScriptedPolicy.from_file(script_file(settings, interface), task.task_id, model=settings.model or "scripted")

    def transcript_path(self, interface: Interface, task: TaskSpec) -> Path:
        return self.config.out_dir / "transcripts" / interface.value / f"{task.task_id}.jsonl"

    def run_task(self, interface: Interface, task: TaskSpec) -> Tuple[TaskResult, Transcript]:
        run_tag = f"{interface.value}-{task.task_id}-{uuid.uuid4().hex[:12]}"
        agent_config = AgentConfig(
            interface=interface,
            shops=ShopEndpoints(shops=self.shops),
            policy=self.config.policy,
            max_steps=self.config.max_steps,
            max_search_k=self.config.max_search_k,
            run_tag=run_tag,
        )
        policy = self.policy_factory(interface, task)
        transcript = run_agent(task.prompt, agent_config, policy, self.http, self.rag_index, task.task_id)
        write_transcript(transcript, self.transcript_path(interface, task))
        snapshot = fetch_run_snapshot(self.http, self.shops[0], run_tag) if task.is_transactional else None
        drop_run_sessions(self.http, self.shops[0], run_tag)
        result = score_task(task, transcript, self.pricing, snapshot)
        logger.info(
            f"{interface.value}/{task.task_id}: CR={result.cr} F1={result.f1:.2f} "
            f"tokens={result.total_tokens} steps={result.steps}"
        )
        return result, transcript

    def run(self) -> List[TaskResult]:
        """
        Run all tasks on all configured interfaces.

        :return: results ordered by interface, then task file order
        """
        jobs = [(interface, task) for interface in self.config.interfaces for task in self.tasks]
        logger.info(f"Running {len(jobs)} task runs with parallelism {self.config.parallel}")
        with ThreadPoolExecutor(max_workers=self.config.parallel) as pool:
            outcomes = list(pool.map(lambda job: self.run_task(*job), jobs))
        if self.config.policy.kind == "live" and outcomes and all(t.error for _, t in outcomes):
            raise PolicyError(f"every run failed; is the chat endpoint reachable? last error: {outcomes[-1][1].error}")
        return [result for result, _ in outcomes]


def results_by_interface(results: List[TaskResult]) -> Dict[str, List[TaskResult]]:
    grouped: Dict[str, List[TaskResult]] = {}
    for result in results:
        grouped.setdefault(result.interface, []).append(result)
    return grouped
