"""
Benchmark tasks and their gold answers.

A task file is line-JSON; each record looks like::

    {"task_id": "specific-01", "category": "specific",
     "prompt": "Find all offers for ...",
     "gold": {"urls": ["{offer_url:D-001}", "http://localhost:9082/product/D-016"]}}

Retrieval gold may also list offer ids (``"offers": ["D-001"]``).
Transactional gold gives expected per-shop carts and/or orders::

    "gold": {"orders": {"shop2": [{"D-017": 1}]}}
    "gold": {"carts": {"shop1": {"D-003": 1}}}

``{offer_url:ID}`` placeholders in prompts and URLs are replaced by the offer's
canonical URL when the file is loaded.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from webmall_bench.catalog import Catalog, normalize_url
from webmall_bench.errors import ConfigError, EvaluationError, NormalizationError

logger = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\{offer_url:([^}]+)\}")

CATEGORIES = ("specific", "vague", "cheapest", "transactional")


class UrlSet(BaseModel):
    kind: Literal["urls"] = "urls"
    urls: List[str] = Field(default_factory=list)
    allow_empty: bool = False

    @model_validator(mode="after")
    def non_empty(self) -> "UrlSet":
        if not self.urls and not self.allow_empty:
            raise ValueError("retrieval gold is empty; set allow_empty for empty-answer tasks")
        return self

    def canonical(self) -> List[str]:
        return sorted({normalize_url(u) for u in self.urls})


class GoldState(BaseModel):
    """Expected carts (offer_id -> quantity) and orders per shop."""

    kind: Literal["state"] = "state"
    carts: Optional[Dict[str, Dict[str, int]]] = None
    orders: Optional[Dict[str, List[Dict[str, int]]]] = None

    @model_validator(mode="after")
    def has_expectation(self) -> "GoldState":
        if self.carts is None and self.orders is None:
            raise ValueError("transactional gold needs carts or orders")
        return self


class TaskSpec(BaseModel):
    task_id: str
    category: Literal["specific", "vague", "cheapest", "transactional"]
    prompt: str
    gold: Union[UrlSet, GoldState] = Field(discriminator="kind")

    @property
    def is_transactional(self) -> bool:
        return isinstance(self.gold, GoldState)


def resolve_placeholders(text: str, catalog: Optional[Catalog]) -> str:
    def replace(match: "re.Match[str]") -> str:
        offer_id = match.group(1).strip()
        if catalog is None:
            raise EvaluationError(f"placeholder {match.group(0)} needs a catalog")
        offer = catalog.get(offer_id)
        if offer is None:
            raise EvaluationError(f"placeholder refers to unknown offer {offer_id!r}")
        return offer.url

    return PLACEHOLDER.sub(replace, text)


def parse_task_record(record: Dict[str, Any], catalog: Optional[Catalog] = None) -> TaskSpec:
    """
    Build a TaskSpec from one task-file record.

    Args:
        record: decoded JSON object
        catalog: used to resolve ``{offer_url:ID}`` placeholders and ``offers`` lists

    Returns:
        the validated task
    """
    record = dict(record)
    gold = dict(record.get("gold") or {})
    record["prompt"] = resolve_placeholders(str(record.get("prompt", "")), catalog)
    if "urls" in gold or "offers" in gold:
        urls = [resolve_placeholders(u, catalog) for u in gold.get("urls", [])]
        for offer_id in gold.get("offers", []):
            urls.append(resolve_placeholders(f"{{offer_url:{offer_id}}}", catalog))
        try:
            urls = [normalize_url(u) for u in urls]
        except NormalizationError as e:
            raise EvaluationError(f"task {record.get('task_id')}: bad gold URL: {e}") from e
        record["gold"] = {"kind": "urls", "urls": urls, "allow_empty": bool(gold.get("allow_empty", False))}
    elif gold.get("allow_empty"):
        record["gold"] = {"kind": "urls", "urls": [], "allow_empty": True}
    else:
        record["gold"] = {"kind": "state", "carts": gold.get("carts"), "orders": gold.get("orders")}
    try:
        return TaskSpec.model_validate(record)
    except ValidationError as e:
        raise EvaluationError(f"invalid task record {record.get('task_id')!r}: {e}") from e


def load_tasks(path: Union[str, Path], catalog: Optional[Catalog] = None) -> List[TaskSpec]:
    """
    Load a line-JSON task file.

    :param path: task file
    :param catalog: catalog for placeholder resolution
    :return: tasks in file order
    :raises ConfigError: if the file does not exist
    :raises EvaluationError: on an invalid or duplicate record
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"task file not found: {path}")
    tasks: List[TaskSpec] = []
    seen = set()
    with path.open(encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise EvaluationError(f"{path}: line {line_number}: invalid JSON: {e}") from e
            task = parse_task_record(record, catalog)
            if task.task_id in seen:
                raise EvaluationError(f"{path}: line {line_number}: duplicate task_id {task.task_id!r}")
            seen.add(task.task_id)
            tasks.append(task)
    logger.info(f"Loaded {len(tasks)} tasks from {path}")
    return tasks
