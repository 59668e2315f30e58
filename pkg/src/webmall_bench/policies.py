"""
Decision policies that drive the agents.

A policy receives the observation produced by the previous action and returns
exactly one :class:`PolicyDecision`. Two implementations exist:

* :class:`ScriptedPolicy` replays decisions from a line-JSON file, which makes
  runs reproducible offline.
* :class:`LiveChatPolicy` runs a pydantic-ai agent against an
  OpenAI-compatible endpoint and records the token usage it reports.
"""

import json
import logging
import re
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import httpx
from openai import APIError, AsyncOpenAI
from pydantic import BaseModel, Field, TypeAdapter, ValidationError
from pydantic_ai import Agent, AgentRunResult, DeferredToolRequests, DeferredToolResults
from pydantic_ai.exceptions import AgentRunError
from pydantic_ai.messages import ModelMessage, ToolCallPart
from pydantic_ai.models.openai import OpenAIChatModel
from pydantic_ai.providers.openai import OpenAIProvider
from pydantic_ai.settings import ModelSettings
from pydantic_ai.tools import ToolDefinition
from pydantic_ai.toolsets import ExternalToolset

from webmall_bench.config import EndpointConfig
from webmall_bench.errors import ConfigError, PolicyError

logger = logging.getLogger(__name__)

URL_PATTERN = re.compile(r"https?://[^\s\"'<>,\]\)]+")


class BrowseGoto(BaseModel):
    kind: Literal["goto"] = "goto"
    url: str


class BrowseClick(BaseModel):
    kind: Literal["click"] = "click"
    link: int


class BrowseFill(BaseModel):
    """Fill the fields of a form on the current page and submit it."""

    kind: Literal["fill"] = "fill"
    form: int
    values: Dict[str, str] = Field(default_factory=dict)


class Remember(BaseModel):
    kind: Literal["remember"] = "remember"
    note: str


class Search(BaseModel):
    kind: Literal["search"] = "search"
    query: str
    k: int = 5


class ToolCall(BaseModel):
    kind: Literal["tool"] = "tool"
    shop: str = ""
    tool: str
    args: Dict[str, Any] = Field(default_factory=dict)


class Finish(BaseModel):
    """End of a run: product URLs for retrieval tasks, ``done`` for transactional ones."""

    kind: Literal["finish"] = "finish"
    answer: List[str] = Field(default_factory=list)
    done: bool = False


AgentAction = Annotated[
    Union[BrowseGoto, BrowseClick, BrowseFill, Remember, Search, ToolCall, Finish],
    Field(discriminator="kind"),
]

_ACTION_ADAPTER = TypeAdapter(AgentAction)


def parse_action(data: Dict[str, Any]) -> AgentAction:
    return _ACTION_ADAPTER.validate_python(data)


class Usage(BaseModel):
    input_tokens: int = Field(default=0, ge=0)
    output_tokens: int = Field(default=0, ge=0)

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            input_tokens=self.input_tokens + other.input_tokens,
            output_tokens=self.output_tokens + other.output_tokens,
        )


class PolicyDecision(BaseModel):
    action: AgentAction
    usage: Usage = Field(default_factory=Usage)


class FunctionSpec(BaseModel):
    """An action the policy may choose, described by a JSON schema."""

    name: str
    description: str = ""
    parameters: Dict[str, Any] = Field(default_factory=lambda: {"type": "object", "properties": {}})

    def to_tool_definition(self) -> ToolDefinition:
        return ToolDefinition(name=self.name, description=self.description, parameters_json_schema=self.parameters)


class Policy:
    """Base class. ``start`` opens a run, ``decide`` is called once per step."""

    model: str = "unknown"

    def start(self, system_prompt: str, task_prompt: str, functions: List[FunctionSpec]) -> None:
        pass

    def decide(self, observation: str) -> PolicyDecision:
        raise NotImplementedError


class ScriptedPolicy(Policy):
    """
    Replays a fixed list of decisions.

    When the script runs out the policy finishes with an empty answer, unless
    ``cycle`` is set, in which case it starts over (a policy that never
    finishes).
    """

    def __init__(self, decisions: List[PolicyDecision], model: str = "scripted", cycle: bool = False):
        self.decisions = list(decisions)
        self.model = model
        self.cycle = cycle
        self._position = 0

    def start(self, system_prompt: str, task_prompt: str, functions: List[FunctionSpec]) -> None:
        self._position = 0

    def decide(self, observation: str) -> PolicyDecision:
        if self._position >= len(self.decisions):
            if not self.cycle or not self.decisions:
                return PolicyDecision(action=Finish())
            self._position = 0
        decision = self.decisions[self._position]
        self._position += 1
        return decision

    @classmethod
    def from_file(cls, path: Union[str, Path], task_id: str, model: str = "scripted") -> "ScriptedPolicy":
        """
        Load the decisions for one task from a shared script file.

        Each line is ``{"task_id": ..., "action": {...}, "usage": {...}}``.

        :param path: line-JSON script file
        :param task_id: only lines for this task are kept, in file order
        :param model: model id reported in transcripts
        :return: scripted policy
        """
        scripts = load_scripts(path)
        return cls(scripts.get(task_id, []), model=model)


def load_scripts(path: Union[str, Path]) -> Dict[str, List[PolicyDecision]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"script file not found: {path}")
    scripts: Dict[str, List[PolicyDecision]] = {}
    with path.open(encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                decision = PolicyDecision(
                    action=parse_action(record["action"]),
                    usage=Usage(**record.get("usage", {})),
                )
            except (ValueError, KeyError, TypeError, ValidationError) as e:
                raise ConfigError(f"{path}: line {line_number}: invalid script record: {e}") from e
            scripts.setdefault(record["task_id"], []).append(decision)
    logger.debug(f"Loaded scripts for {len(scripts)} tasks from {path}")
    return scripts


def action_from_call(name: str, args: Dict[str, Any]) -> AgentAction:
    """
    Map a function call chosen by the model onto an agent action.

    Browse, search and finish functions map one to one; ``shop__tool`` names
    become tool calls on that shop; any other name becomes a tool call whose
    shop is taken from a ``shop`` argument when present.
    """
    args = dict(args)
    if name == "goto":
        return BrowseGoto(url=args["url"])
    if name == "click":
        return BrowseClick(link=args["link"])
    if name == "fill_form":
        return BrowseFill(form=args["form"], values={k: str(v) for k, v in args.get("values", {}).items()})
    if name == "remember":
        return Remember(note=args["note"])
    if name == "search":
        return Search(query=args["query"], k=args.get("k", 5))
    if name == "finish":
        return Finish(answer=list(args.get("urls", [])), done=bool(args.get("done", False)))
    if "__" in name:
        shop, tool = name.split("__", 1)
        return ToolCall(shop=shop, tool=tool, args=args)
    shop = args.pop("shop", "")
    return ToolCall(shop=str(shop), tool=name, args=args)


class LiveChatPolicy(Policy):
    """
    Policy backed by a pydantic-ai agent on an OpenAI-compatible endpoint.

    The agent's functions are registered as external tools: a run ends as soon
    as the model calls one, the harness carries out that action, and the next
    run resumes the conversation with the observation as the tool result. A
    plain text reply finishes the task with the URLs it contains.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        seed: Optional[int] = None,
        http_client: Optional[httpx.AsyncClient] = None,
    ):
        self.endpoint = endpoint
        self.model = endpoint.model
        self.seed = seed
        client = AsyncOpenAI(
            base_url=endpoint.base_url,
            # local endpoints accept any key
            api_key=endpoint.api_key or "none",
            max_retries=endpoint.max_retries - 1,
            timeout=endpoint.timeout_seconds,
            http_client=http_client,
        )
        self.ai_model = OpenAIChatModel(endpoint.model, provider=OpenAIProvider(openai_client=client))
        self.agent: Optional[Agent] = None
        self.task_prompt = ""
        self.history: List[ModelMessage] = []
        self.pending: List[ToolCallPart] = []

    def start(self, system_prompt: str, task_prompt: str, functions: List[FunctionSpec]) -> None:
        toolsets = [ExternalToolset([f.to_tool_definition() for f in functions])] if functions else []
        self.agent = Agent(
            self.ai_model,
            system_prompt=system_prompt,
            output_type=[str, DeferredToolRequests],
            toolsets=toolsets,
        )
        self.task_prompt = task_prompt
        self.history = []
        self.pending = []

    def _run(self, observation: str) -> AgentRunResult:
        settings = ModelSettings(seed=self.seed) if self.seed is not None else None
        if self.pending:
            first, *rest = self.pending
            results = DeferredToolResults(calls={first.tool_call_id: observation})
            for call in rest:
                results.calls[call.tool_call_id] = "Not executed: only one action is taken per step."
            return self.agent.run_sync(
                message_history=self.history, deferred_tool_results=results, model_settings=settings
            )
        if not self.history:
            prompt = f"{self.task_prompt}\n\n{observation}" if observation else self.task_prompt
            return self.agent.run_sync(prompt, model_settings=settings)
        return self.agent.run_sync(observation, message_history=self.history, model_settings=settings)

    def decide(self, observation: str) -> PolicyDecision:
        if self.agent is None:
            raise PolicyError("decide called before start")
        usage = Usage()
        last_error = ""
        for attempt in range(1, self.endpoint.max_retries + 1):
            try:
                result = self._run(observation)
            except (AgentRunError, APIError) as e:
                raise PolicyError(f"chat endpoint failed: {e}") from e
            run_usage = result.usage()
            usage = usage + Usage(input_tokens=run_usage.input_tokens, output_tokens=run_usage.output_tokens)
            self.history = result.all_messages()
            self.pending = []
            if isinstance(result.output, str):
                urls = [url.rstrip(".;:!?") for url in URL_PATTERN.findall(result.output)]
                return PolicyDecision(action=Finish(answer=urls, done=True), usage=usage)
            self.pending = list(result.output.calls)
            call = self.pending[0]
            try:
                action = action_from_call(call.tool_name, call.args_as_dict())
            except (ValueError, KeyError, TypeError, ValidationError) as e:
                last_error = f"invalid arguments for {call.tool_name}: {e}"
                logger.warning(f"Model call rejected (attempt {attempt}/{self.endpoint.max_retries}): {last_error}")
                observation = f"Error: {last_error}"
                continue
            return PolicyDecision(action=action, usage=usage)
        raise PolicyError(f"no valid action after {self.endpoint.max_retries} attempts: {last_error}")
