"""
The four agent runners: HTML browsing, RAG over the crawled index, MCP tool
calling and NLWeb ``ask`` endpoints.

All runners share one loop (observe, decide, act) with a step budget, token
accounting and transcript capture; they differ in the actions they accept and
in how an action reaches the shops. Actions outside an agent's permitted set
are rejected and recorded, never executed.
"""

import json
import logging
import time
from collections import deque
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, List, Literal, Optional, Set, Tuple, Union
from urllib.parse import urlsplit

import httpx
from pydantic import BaseModel, Field, model_validator

from webmall_bench.catalog import Shop, find_shop, normalize_url
from webmall_bench.commerce import RUN_HEADER
from webmall_bench.errors import NetworkError, NormalizationError, PolicyError
from webmall_bench.jsonrpc import JsonRpcClient
from webmall_bench.policies import (
    AgentAction,
    BrowseClick,
    BrowseFill,
    BrowseGoto,
    Finish,
    FunctionSpec,
    Policy,
    Remember,
    Search,
    ToolCall,
    Usage,
)
from webmall_bench.search_index import Index, search
from webmall_bench.shop_html import SESSION_COOKIE, PageModel, extract_page_model
from webmall_bench.shop_mcp import SEARCH_SCHEMAS
from webmall_bench.shop_nlweb import NLWEB_TOOLS

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).parent / "prompts"

HTML_MAX_STEPS = 40
TOOL_MAX_STEPS = 20
MAX_OBSERVATION_CHARS = 6000
SESSION_PLACEHOLDER = "$session"
SESSION_KEYS = ("session", "cart", "sid", "token")
RAG_FUNCTIONS = ("add_to_cart", "view_cart", "checkout")


class Interface(str, Enum):
    HTML = "html"
    RAG = "rag"
    MCP = "mcp"
    NLWEB = "nlweb"


PERMITTED_ACTIONS: Dict[Interface, Tuple[str, ...]] = {
    Interface.HTML: ("goto", "click", "fill", "remember", "finish"),
    Interface.RAG: ("search", "tool", "finish"),
    Interface.MCP: ("tool", "finish"),
    Interface.NLWEB: ("tool", "finish"),
}


class ShopEndpoints(BaseModel):
    """Where the agents reach each shop."""

    shops: List[Shop]

    def shop(self, shop_id: str) -> Optional[Shop]:
        return next((s for s in self.shops if s.shop_id == shop_id), None)

    def find(self, url: str) -> Optional[Shop]:
        return find_shop(self.shops, url)

    @staticmethod
    def endpoint(shop: Shop, path: str) -> str:
        return f"{shop.base_url.rstrip('/')}{path}"

    def describe(self) -> str:
        return "\n".join(f"- {s.shop_id}: {s.display_name} at {s.base_url}" for s in self.shops)


class PolicySettings(BaseModel):
    kind: Literal["live", "script"] = "script"
    script_path: Optional[str] = None
    model: Optional[str] = None


class AgentConfig(BaseModel):
    interface: Interface
    shops: ShopEndpoints
    policy: PolicySettings = Field(default_factory=PolicySettings)
    max_steps: Optional[int] = Field(default=None, ge=1)
    max_search_k: int = Field(default=20, ge=1)
    memory_size: int = Field(default=10, ge=1)
    run_tag: Optional[str] = None

    @model_validator(mode="after")
    def default_budget(self) -> "AgentConfig":
        if self.max_steps is None:
            self.max_steps = HTML_MAX_STEPS if self.interface == Interface.HTML else TOOL_MAX_STEPS
        return self


class Step(BaseModel):
    index: int
    observation: str
    action: Dict[str, Any]
    accepted: bool = True
    result: str = ""
    error: Optional[str] = None
    observed_urls: List[str] = Field(default_factory=list)
    usage: Usage = Field(default_factory=Usage)


class Transcript(BaseModel):
    task_id: str
    interface: Interface
    model: str
    steps: List[Step] = Field(default_factory=list)
    observed_urls: List[str] = Field(default_factory=list)
    answer: List[str] = Field(default_factory=list)
    done: bool = False
    finished: bool = False
    search_calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    wall_seconds: float = Field(default=0.0, ge=0)
    error: Optional[str] = None

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    def recompute_totals(self) -> None:
        self.input_tokens = sum(s.usage.input_tokens for s in self.steps)
        self.output_tokens = sum(s.usage.output_tokens for s in self.steps)


class Outcome(BaseModel):
    """What executing one action produced."""

    result: str
    error: Optional[str] = None
    urls: List[str] = Field(default_factory=list)
    search: bool = False


def load_prompt(interface: Interface, **values: Any) -> str:
    template = (PROMPTS_DIR / f"{interface.value}.txt").read_text(encoding="utf-8")
    return template.format(**values)


def collect_urls(value: Any) -> List[str]:
    """Every http(s) string nested anywhere in a JSON value, in document order."""
    found: List[str] = []
    if isinstance(value, str):
        if value.startswith(("http://", "https://")):
            found.append(value)
    elif isinstance(value, dict):
        for item in value.values():
            found.extend(collect_urls(item))
    elif isinstance(value, list):
        for item in value:
            found.extend(collect_urls(item))
    return found


def _canonical(url: str) -> str:
    try:
        return normalize_url(url)
    except NormalizationError:
        return url


def _function(name: str, description: str, properties: Dict[str, Any], required: List[str]) -> FunctionSpec:
    return FunctionSpec(
        name=name,
        description=description,
        parameters={"type": "object", "properties": properties, "required": required},
    )


FINISH_FUNCTION = _function(
    "finish",
    "End the task. urls: the product page URLs answering the task; done: true when a cart or checkout task is complete.",
    {"urls": {"type": "array", "items": {"type": "string"}}, "done": {"type": "boolean"}},
    [],
)


class AgentRunner:
    """
    The shared observe-decide-act loop.

    Subclasses set ``interface`` and implement :meth:`functions`,
    :meth:`initial_observation` and :meth:`act`.
    """

    interface: Interface

    def __init__(self, config: AgentConfig, policy: Policy, http: httpx.Client, task_id: str = ""):
        self.config = config
        self.policy = policy
        self.http = http
        self.task_id = task_id
        self._secrets: Set[str] = set()

    @property
    def permitted(self) -> Tuple[str, ...]:
        return PERMITTED_ACTIONS[self.interface]

    def headers(self) -> Dict[str, str]:
        return {RUN_HEADER: self.config.run_tag} if self.config.run_tag else {}

    def redact(self, text: str) -> str:
        """Replace session tokens by a placeholder so transcripts do not depend on them."""
        for secret in sorted(self._secrets, key=len, reverse=True):
            text = text.replace(secret, SESSION_PLACEHOLDER)
        return text

    def prepare(self) -> None:
        pass

    def functions(self) -> List[FunctionSpec]:
        raise NotImplementedError

    def initial_observation(self) -> str:
        raise NotImplementedError

    def act(self, action: AgentAction) -> Outcome:
        raise NotImplementedError

    def observe(self, outcome: Outcome) -> str:
        return outcome.result

    def run(self, task_prompt: str) -> Transcript:
        """
        Run one task.

        :param task_prompt: the task as shown to the policy
        :return: transcript of the run; ``error`` is set when the policy or the
            shops failed and the run was aborted
        """
        transcript = Transcript(task_id=self.task_id, interface=self.interface, model=self.policy.model)
        seen: Set[str] = set()
        started = time.monotonic()
        try:
            self.prepare()
            system_prompt = load_prompt(
                self.interface, shops=self.config.shops.describe(), max_steps=self.config.max_steps
            )
            self.policy.start(system_prompt, task_prompt, self.functions())
            observation = self.redact(self.initial_observation())
            for index in range(self.config.max_steps):
                decision = self.policy.decide(observation)
                action = decision.action
                step = Step(
                    index=index,
                    observation=observation[:MAX_OBSERVATION_CHARS],
                    action=action.model_dump(mode="json"),
                    usage=decision.usage,
                )
                transcript.steps.append(step)
                if isinstance(action, Finish):
                    transcript.answer = list(action.answer)
                    transcript.done = action.done
                    transcript.finished = True
                    break
                if action.kind not in self.permitted:
                    step.accepted = False
                    step.error = f"action '{action.kind}' is not available to the {self.interface.value} agent"
                    logger.warning(f"{self.task_id}: rejected {action.kind} action")
                    observation = f"Error: {step.error}"
                    continue
                outcome = self.act(action)
                if outcome.search:
                    transcript.search_calls += 1
                step.result = self.redact(outcome.result)[:MAX_OBSERVATION_CHARS]
                step.error = outcome.error
                for url in outcome.urls:
                    url = _canonical(url)
                    step.observed_urls.append(url)
                    if url not in seen:
                        seen.add(url)
                        transcript.observed_urls.append(url)
                if outcome.error:
                    logger.warning(f"{self.task_id}: step {index} failed: {outcome.error}")
                observation = self.redact(self.observe(outcome))
            else:
                logger.info(f"{self.task_id}: step budget of {self.config.max_steps} exhausted")
        except (PolicyError, NetworkError) as e:
            logger.error(f"{self.task_id}: run aborted: {e}")
            transcript.error = str(e)
            transcript.answer = []
            transcript.done = False
        transcript.recompute_totals()
        transcript.wall_seconds = time.monotonic() - started
        return transcript


# -- HTML -------------------------------------------------------------------


class HtmlAgent(AgentRunner):
    """Browses the storefronts page by page, keeping a bounded note memory."""

    interface = Interface.HTML

    def __init__(self, config: AgentConfig, policy: Policy, http: httpx.Client, task_id: str = ""):
        super().__init__(config, policy, http, task_id)
        self.page: Optional[PageModel] = None
        self.cookie: Optional[str] = None
        self.memory: Deque[str] = deque(maxlen=config.memory_size)

    def functions(self) -> List[FunctionSpec]:
        return [
            _function("goto", "Open a page of one of the shops.", {"url": {"type": "string"}}, ["url"]),
            _function("click", "Follow a numbered link of the current page.", {"link": {"type": "integer"}}, ["link"]),
            _function(
                "fill_form",
                "Fill a numbered form of the current page and submit it. values maps field names to values.",
                {"form": {"type": "integer"}, "values": {"type": "object"}},
                ["form", "values"],
            ),
            _function("remember", "Store a short note in memory.", {"note": {"type": "string"}}, ["note"]),
            FINISH_FUNCTION,
        ]

    def initial_observation(self) -> str:
        return "No page is open yet. Start with goto on one of the shop home pages."

    def headers(self) -> Dict[str, str]:
        # an explicit Cookie header keeps a shared client's cookie jar out of the session
        headers = super().headers()
        headers["Cookie"] = f"{SESSION_COOKIE}={self.cookie or ''}"
        return headers

    def _fetch(self, method: str, url: str, data: Optional[Dict[str, str]] = None) -> Outcome:
        if self.config.shops.find(url) is None:
            return Outcome(result=f"Error: {url} is not a page of the shops", error=f"navigation outside the shops: {url}")
        try:
            if method == "GET":
                response = self.http.get(url, params=data or None, headers=self.headers())
            else:
                response = self.http.post(url, data=data or {}, headers=self.headers())
        except httpx.HTTPError as e:
            return Outcome(result=f"Error: cannot load {url}", error=f"transport error: {e}")
        for header in response.headers.get_list("set-cookie"):
            name, _, rest = header.partition("=")
            if name.strip() == SESSION_COOKIE:
                self.cookie = rest.split(";", 1)[0]
                self._secrets.add(self.cookie)
        self.page = extract_page_model(response.text, _canonical(str(response.url)))
        urls = [self.page.url] + [link.href for link in self.page.content_links]
        error = None if response.status_code == 200 else f"HTTP {response.status_code}"
        is_search = method == "GET" and urlsplit(url).path.rstrip("/").endswith("/search")
        return Outcome(result=self.page.digest(), error=error, urls=urls, search=is_search)

    def act(self, action: AgentAction) -> Outcome:
        if isinstance(action, BrowseGoto):
            return self._fetch("GET", action.url)
        if isinstance(action, Remember):
            self.memory.append(action.note)
            return Outcome(result=self.page.digest() if self.page else "Noted.")
        if self.page is None:
            return Outcome(result="Error: no page is open", error="no page is open")
        if isinstance(action, BrowseClick):
            if not 0 <= action.link < len(self.page.links):
                return Outcome(result=f"Error: no link [{action.link}]\n{self.page.digest()}",
                               error=f"link index {action.link} out of range")
            return self._fetch("GET", self.page.links[action.link].href)
        if isinstance(action, BrowseFill):
            if not 0 <= action.form < len(self.page.forms):
                return Outcome(result=f"Error: no form [{action.form}]\n{self.page.digest()}",
                               error=f"form index {action.form} out of range")
            form = self.page.forms[action.form]
            data = {f.name: f.value for f in form.fields}
            unknown = sorted(set(action.values) - set(data))
            if unknown:
                return Outcome(result=f"Error: the form has no field {', '.join(unknown)}\n{self.page.digest()}",
                               error=f"unknown form fields: {unknown}")
            data.update(action.values)
            return self._fetch(form.method, form.action, data)
        return Outcome(result="Error: unsupported action", error="unsupported action")

    def observe(self, outcome: Outcome) -> str:
        if not self.memory:
            return outcome.result
        notes = "\n".join(f"- {note}" for note in self.memory)
        return f"{outcome.result}\nMemory:\n{notes}"


# -- RAG --------------------------------------------------------------------


class RagAgent(AgentRunner):
    """
    Searches the crawled index and never opens shop pages.

    Cart and checkout go through the shops' JSON store API, products being
    identified by their page URL.
    """

    interface = Interface.RAG

    def __init__(self, config: AgentConfig, policy: Policy, http: httpx.Client, index: Index, task_id: str = ""):
        super().__init__(config, policy, http, task_id)
        self.index = index
        self.session: Optional[str] = None

    def functions(self) -> List[FunctionSpec]:
        return [
            _function(
                "search",
                "Retrieve the k crawled shop pages most similar to the query.",
                {"query": {"type": "string"}, "k": {"type": "integer"}},
                ["query"],
            ),
            _function(
                "add_to_cart",
                "Add the product at a product page URL to the cart of its shop.",
                {"url": {"type": "string"}, "quantity": {"type": "integer"}},
                ["url"],
            ),
            _function("view_cart", "Show the cart of a shop.", {"shop": {"type": "string"}}, ["shop"]),
            _function(
                "checkout",
                "Place the order for the cart of a shop.",
                {"shop": {"type": "string"}, "shipping": {"type": "object"}, "payment": {"type": "object"}},
                ["shop", "shipping", "payment"],
            ),
            FINISH_FUNCTION,
        ]

    def initial_observation(self) -> str:
        return f"The index holds {len(self.index)} pages from {len(self.config.shops.shops)} shops."

    def _search(self, action: Search) -> Outcome:
        k = max(0, min(action.k, self.config.max_search_k))
        hits = search(self.index, action.query, k)
        if not hits:
            return Outcome(result=f"No results for '{action.query}'.", search=True)
        lines = []
        for i, hit in enumerate(hits, start=1):
            lines.append(f"[{i}] {hit.doc.source_url} (score {hit.score:.3f})\n{hit.doc.text[:400]}")
        return Outcome(result="\n".join(lines), urls=[h.doc.source_url for h in hits], search=True)

    def _shop_of(self, action: ToolCall) -> Optional[Shop]:
        if action.tool == "add_to_cart":
            return self.config.shops.find(str(action.args.get("url", "")))
        shop_id = action.shop or str(action.args.get("shop", ""))
        return self.config.shops.shop(shop_id) or self.config.shops.find(shop_id)

    def _api(self, method: str, shop: Shop, path: str, **kwargs: Any) -> Tuple[Optional[Any], Optional[str]]:
        try:
            response = self.http.request(method, self.config.shops.endpoint(shop, path), headers=self.headers(), **kwargs)
        except httpx.HTTPError as e:
            return None, f"transport error: {e}"
        try:
            body = response.json()
        except ValueError:
            body = {"error": response.text[:200]}
        if response.status_code != 200:
            message = body.get("error") or body.get("detail") if isinstance(body, dict) else None
            return None, str(message or f"HTTP {response.status_code}")
        return body, None

    def _ensure_session(self, shop: Shop) -> Optional[str]:
        if self.session is None:
            body, error = self._api("POST", shop, "/api/session")
            if error:
                return error
            self.session = body["session"]
            self._secrets.add(self.session)
        return None

    def _transaction(self, action: ToolCall) -> Outcome:
        if action.tool not in RAG_FUNCTIONS:
            return Outcome(result=f"Error: unknown function {action.tool}", error=f"unknown function {action.tool}")
        shop = self._shop_of(action)
        if shop is None:
            return Outcome(result="Error: cannot tell which shop is meant", error="unknown shop")
        error = self._ensure_session(shop)
        if error:
            return Outcome(result=f"Error: {error}", error=error)
        args = action.args
        if action.tool == "add_to_cart":
            quantity = args.get("quantity", 1)
            body, error = self._api(
                "POST", shop, "/api/cart",
                json={"session": self.session, "url": args.get("url"), "quantity": 1 if quantity is None else quantity},
            )
        elif action.tool == "view_cart":
            body, error = self._api("GET", shop, "/api/cart", params={"session": self.session})
        else:
            body, error = self._api(
                "POST", shop, "/api/checkout",
                json={"session": self.session, "shipping": args.get("shipping") or {}, "payment": args.get("payment")},
            )
        if error:
            return Outcome(result=f"Error: {error}", error=error)
        return Outcome(result=json.dumps(body), urls=collect_urls(body))

    def act(self, action: AgentAction) -> Outcome:
        if isinstance(action, Search):
            return self._search(action)
        return self._transaction(action)


# -- MCP / NLWeb ------------------------------------------------------------


class McpAgent(AgentRunner):
    """Calls the shops' JSON-RPC tools, discovered with tools/list at the start of a run."""

    interface = Interface.MCP
    path = "/mcp"

    def __init__(self, config: AgentConfig, policy: Policy, http: httpx.Client, task_id: str = ""):
        super().__init__(config, policy, http, task_id)
        self.client = JsonRpcClient(http, self.headers())
        self.tools: Dict[str, List[Dict[str, Any]]] = {}
        self.sessions: Dict[str, str] = {}

    def allowed_tool(self, name: str) -> bool:
        return True

    def search_tools(self) -> Set[str]:
        return {schema[0] for schema in SEARCH_SCHEMAS.values()}

    def url(self, shop: Shop) -> str:
        return self.config.shops.endpoint(shop, self.path)

    def prepare(self) -> None:
        for shop in self.config.shops.shops:
            self.tools[shop.shop_id] = self.client.list_tools(self.url(shop))
        logger.debug(f"{self.task_id}: discovered {sum(len(t) for t in self.tools.values())} tools")

    def functions(self) -> List[FunctionSpec]:
        functions = []
        for shop in self.config.shops.shops:
            for tool in self.tools.get(shop.shop_id, []):
                functions.append(
                    FunctionSpec(
                        name=f"{shop.shop_id}__{tool['name']}",
                        description=f"[{shop.display_name}] {tool.get('description', '')}",
                        parameters=tool.get("inputSchema") or {"type": "object", "properties": {}},
                    )
                )
        return functions + [FINISH_FUNCTION]

    def initial_observation(self) -> str:
        lines = ["Available tools:"]
        for shop in self.config.shops.shops:
            for tool in self.tools.get(shop.shop_id, []):
                params = ", ".join((tool.get("inputSchema") or {}).get("properties", {}))
                lines.append(f"- {shop.shop_id}__{tool['name']}({params}): {tool.get('description', '')}")
        return "\n".join(lines)

    def _bind(self, value: Any, shop_id: str) -> Any:
        if value == SESSION_PLACEHOLDER and shop_id in self.sessions:
            return self.sessions[shop_id]
        if isinstance(value, dict):
            return {k: self._bind(v, shop_id) for k, v in value.items()}
        if isinstance(value, list):
            return [self._bind(v, shop_id) for v in value]
        return value

    def _capture_session(self, shop_id: str, content: Any) -> None:
        if isinstance(content, dict) and len(content) == 1:
            key, value = next(iter(content.items()))
            if key in SESSION_KEYS and isinstance(value, str):
                self.sessions[shop_id] = value
                self._secrets.add(value)

    def act(self, action: AgentAction) -> Outcome:
        shop = self.config.shops.shop(action.shop)
        if shop is None:
            return Outcome(result=f"Error: unknown shop '{action.shop}'", error=f"unknown shop {action.shop!r}")
        if not self.allowed_tool(action.tool):
            return Outcome(result=f"Error: {action.tool} is not an available tool", error=f"tool {action.tool} not allowed")
        is_search = action.tool in self.search_tools()
        try:
            envelope = self.client.call_tool(self.url(shop), action.tool, self._bind(action.args, shop.shop_id))
        except NetworkError as e:
            return Outcome(result=f"Error: {e}", error=str(e), search=is_search)
        if "error" in envelope:
            error = envelope["error"]
            message = f"JSON-RPC error {error.get('code')}: {error.get('message')}"
            return Outcome(result=message, error=message, search=is_search)
        result = envelope.get("result", {})
        content = result.get("structuredContent")
        if result.get("isError"):
            message = content.get("error") if isinstance(content, dict) else str(content)
            return Outcome(result=f"Error: {message}", error=message, search=is_search)
        self._capture_session(shop.shop_id, content)
        return Outcome(result=json.dumps(content), urls=collect_urls(content), search=is_search)


class NlwebAgent(McpAgent):
    """Same loop as the MCP agent, restricted to ``ask`` and the uniform cart tools."""

    interface = Interface.NLWEB
    path = "/nlweb"

    def allowed_tool(self, name: str) -> bool:
        return name in {t.name for t in NLWEB_TOOLS}

    def search_tools(self) -> Set[str]:
        return {"ask"}


def run_html_agent(task_prompt: str, config: AgentConfig, policy: Policy, http: httpx.Client,
                   task_id: str = "") -> Transcript:
    return HtmlAgent(config, policy, http, task_id).run(task_prompt)


def run_rag_agent(task_prompt: str, config: AgentConfig, policy: Policy, http: httpx.Client, index: Index,
                  task_id: str = "") -> Transcript:
    return RagAgent(config, policy, http, index, task_id).run(task_prompt)


def run_mcp_agent(task_prompt: str, config: AgentConfig, policy: Policy, http: httpx.Client,
                  task_id: str = "") -> Transcript:
    return McpAgent(config, policy, http, task_id).run(task_prompt)


def run_nlweb_agent(task_prompt: str, config: AgentConfig, policy: Policy, http: httpx.Client,
                    task_id: str = "") -> Transcript:
    return NlwebAgent(config, policy, http, task_id).run(task_prompt)


def run_agent(task_prompt: str, config: AgentConfig, policy: Policy, http: httpx.Client,
              index: Optional[Index] = None, task_id: str = "") -> Transcript:
    """Dispatch on ``config.interface``; the RAG agent needs ``index``."""
    if config.interface == Interface.RAG:
        if index is None:
            raise ValueError("the RAG agent needs an index")
        return run_rag_agent(task_prompt, config, policy, http, index, task_id)
    runners = {Interface.HTML: run_html_agent, Interface.MCP: run_mcp_agent, Interface.NLWEB: run_nlweb_agent}
    return runners[config.interface](task_prompt, config, policy, http, task_id)


def write_transcript(transcript: Transcript, path: Union[str, Path]) -> Path:
    """One line per step followed by a totals record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for step in transcript.steps:
            f.write(json.dumps({"record": "step", **step.model_dump(mode="json")}) + "\n")
        totals = transcript.model_dump(mode="json", exclude={"steps"})
        f.write(json.dumps({"record": "totals", **totals}) + "\n")
    return path


def read_transcript(path: Union[str, Path]) -> Transcript:
    steps: List[Step] = []
    totals: Optional[Dict[str, Any]] = None
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            kind = record.pop("record", "step")
            if kind == "totals":
                totals = record
            else:
                steps.append(Step.model_validate(record))
    if totals is None:
        raise ValueError(f"{path}: transcript has no totals record")
    return Transcript.model_validate({**totals, "steps": steps})
