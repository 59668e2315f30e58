"""
Scoring, cost accounting, aggregation and report rendering.

Retrieval tasks are scored on the set of returned product URLs, transactional
tasks on the cart/order state their run left behind. Results are aggregated
per interface and model (micro: mean over tasks) and per interface (macro:
unweighted mean over the model cells).
"""

import csv
import io
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import duckdb
from pydantic import BaseModel, Field, ValidationError

from webmall_bench.agents import Transcript
from webmall_bench.catalog import DATA_DIR, normalize_url
from webmall_bench.commerce import StateSnapshot
from webmall_bench.errors import ConfigError, EvaluationError, NormalizationError
from webmall_bench.tasks import GoldState, TaskSpec, UrlSet

logger = logging.getLogger(__name__)

DEFAULT_PRICING_PATH = DATA_DIR / "pricing.json"

RETRIEVED = "retrieved"
NON_RETRIEVED = "non-retrieved"

# Labels for manual annotation of false positives; never computed.
FP_CATEGORIES = (
    "Wrong product selected",
    "Wrong product category",
    "Product fails requirements",
    "Price too high",
    "Wrong product variant",
    "Large specification mismatch",
    "Missing product info",
    "Subjectively wrong",
)

REPORT_FORMATS = ("json", "markdown", "csv")


class Score(BaseModel):
    cr: int
    precision: float
    recall: float
    f1: float


def _prf(hits: int, returned: int, gold: int) -> Tuple[float, float, float]:
    if returned == 0 and gold == 0:
        return 1.0, 1.0, 1.0
    if returned == 0 or gold == 0:
        return 0.0, 0.0, 0.0
    precision = hits / returned
    recall = hits / gold
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def _canonical_set(urls: Iterable[str]) -> set:
    found = set()
    for url in urls:
        try:
            found.add(normalize_url(url))
        except NormalizationError:
            found.add(url)
    return found


def score_retrieval(returned: Iterable[str], gold: Union[UrlSet, Iterable[str]]) -> Score:
    """
    Completion rate, precision, recall and F1 of a returned URL list.

    Both sides are normalized and treated as sets, so order and duplicates do
    not matter. Both empty scores 1 everywhere; exactly one side empty scores 0.
    """
    gold_urls = gold.urls if isinstance(gold, UrlSet) else gold
    returned_set = _canonical_set(returned)
    gold_set = _canonical_set(gold_urls)
    precision, recall, f1 = _prf(len(returned_set & gold_set), len(returned_set), len(gold_set))
    return Score(cr=int(returned_set == gold_set), precision=precision, recall=recall, f1=f1)


def _order_key(order: Dict[str, int]) -> Tuple[Tuple[str, int], ...]:
    return tuple(sorted((offer, qty) for offer, qty in order.items() if qty > 0))


def transaction_elements(snapshot: StateSnapshot, gold: GoldState) -> Tuple[Counter, Counter]:
    """
    The (kind, shop, offer_id, quantity) line items compared for partial credit.

    Orders always count; an order the gold does not list is an extra
    element. Carts count only when the gold gives carts.

    :return: (elements in the snapshot, elements in the gold state)
    """
    got: Counter = Counter()
    want: Counter = Counter()
    for target, orders in ((want, gold.orders or {}), (got, snapshot.orders)):
        for shop_id, shop_orders in orders.items():
            for order in shop_orders:
                for offer_id, quantity in _order_key(order):
                    target[("order", shop_id, offer_id, quantity)] += 1
    if gold.carts is not None:
        for target, carts in ((want, gold.carts), (got, snapshot.carts)):
            for shop_id, cart in carts.items():
                for offer_id, quantity in cart.items():
                    if quantity > 0:
                        target[("cart", shop_id, offer_id, quantity)] += 1
    return got, want


def score_transaction(snapshot: StateSnapshot, gold: GoldState) -> Score:
    """
    Score the state a transactional run left behind.

    CR is 1 when every shop's orders (and carts, if the gold gives carts)
    match the gold multisets exactly. Shops absent from the gold must have
    no orders, also when the gold only gives carts. P/R/F1 are computed
    over line items.
    """
    reached = True
    gold_orders = gold.orders or {}
    for shop_id in set(gold_orders) | set(snapshot.orders):
        expected = Counter(_order_key(o) for o in gold_orders.get(shop_id, []))
        actual = Counter(_order_key(o) for o in snapshot.orders_for(shop_id))
        reached = reached and expected == actual
    if gold.carts is not None:
        for shop_id in set(gold.carts) | set(snapshot.carts):
            expected = {k: v for k, v in gold.carts.get(shop_id, {}).items() if v > 0}
            reached = reached and snapshot.cart(shop_id) == expected
    got, want = transaction_elements(snapshot, gold)
    hits = sum((got & want).values())
    precision, recall, f1 = _prf(hits, sum(got.values()), sum(want.values()))
    return Score(cr=int(reached), precision=precision, recall=recall, f1=f1)


class ModelRate(BaseModel):
    input_per_mtok: float = Field(gt=0)
    output_per_mtok: float = Field(gt=0)


class PricingTable(BaseModel):
    """Dollar prices per million input and output tokens, by model id."""

    rates: Dict[str, ModelRate]

    def rate(self, model: str) -> ModelRate:
        if model not in self.rates:
            raise EvaluationError(f"no pricing for model {model!r}")
        return self.rates[model]


def load_pricing(path: Optional[Union[str, Path]] = None) -> PricingTable:
    """Pricing from a JSON map ``{model: {input_per_mtok, output_per_mtok}}``; the bundled table by default."""
    path = Path(path) if path else DEFAULT_PRICING_PATH
    if not path.exists():
        raise ConfigError(f"pricing file not found: {path}")
    try:
        return PricingTable(rates=json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"invalid pricing file {path}: {e}") from e


def compute_cost(input_tokens: int, output_tokens: int, model: str, pricing: PricingTable) -> float:
    rate = pricing.rate(model)
    return input_tokens * rate.input_per_mtok / 1e6 + output_tokens * rate.output_per_mtok / 1e6


def classify_false_negatives(missed: Iterable[str], transcript: Transcript) -> Dict[str, str]:
    """
    Split missed gold URLs into ``retrieved`` (seen during the run but not
    returned) and ``non-retrieved`` (never seen).
    """
    observed = _canonical_set(transcript.observed_urls)
    for step in transcript.steps:
        observed |= _canonical_set(step.observed_urls)
    return {url: RETRIEVED if url in observed else NON_RETRIEVED for url in sorted(_canonical_set(missed))}


class TaskResult(BaseModel):
    task_id: str
    category: str
    interface: str
    model: str
    answer: List[str] = Field(default_factory=list)
    done: bool = False
    cr: int
    precision: float
    recall: float
    f1: float
    input_tokens: int = 0
    output_tokens: int = 0
    cost: float = 0.0
    runtime_seconds: float = 0.0
    search_calls: int = 0
    steps: int = 0
    fn_classification: Dict[str, str] = Field(default_factory=dict)
    error: Optional[str] = None

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


def score_task(
    task: TaskSpec,
    transcript: Transcript,
    pricing: PricingTable,
    snapshot: Optional[StateSnapshot] = None,
) -> TaskResult:
    """
    Score one run of one task.

    Args:
        task: the task with its gold answer
        transcript: the agent's transcript
        pricing: token prices used for the cost
        snapshot: state left by the run; required for transactional tasks

    Returns:
        the task result
    """
    fn: Dict[str, str] = {}
    if isinstance(task.gold, GoldState):
        if snapshot is None:
            raise EvaluationError(f"task {task.task_id} is transactional but no state snapshot was given")
        score = score_transaction(snapshot, task.gold)
    else:
        score = score_retrieval(transcript.answer, task.gold)
        missed = _canonical_set(task.gold.urls) - _canonical_set(transcript.answer)
        fn = classify_false_negatives(missed, transcript)
    return TaskResult(
        task_id=task.task_id,
        category=task.category,
        interface=transcript.interface.value,
        model=transcript.model,
        answer=transcript.answer,
        done=transcript.done,
        cr=score.cr,
        precision=score.precision,
        recall=score.recall,
        f1=score.f1,
        input_tokens=transcript.input_tokens,
        output_tokens=transcript.output_tokens,
        cost=compute_cost(transcript.input_tokens, transcript.output_tokens, transcript.model, pricing),
        runtime_seconds=transcript.wall_seconds,
        search_calls=transcript.search_calls,
        steps=len(transcript.steps),
        fn_classification=fn,
        error=transcript.error,
    )


def rescore_result(result: TaskResult, task: TaskSpec, transcript: Optional[Transcript] = None) -> TaskResult:
    """
    Score a stored retrieval result again against ``task``'s gold answer.

    Transactional results are returned unchanged since the state they were
    scored on is gone. Without a transcript, missed URLs keep their earlier
    classification, or count as non-retrieved.
    """
    if isinstance(task.gold, GoldState):
        return result
    score = score_retrieval(result.answer, task.gold)
    missed = _canonical_set(task.gold.urls) - _canonical_set(result.answer)
    if transcript is not None:
        fn = classify_false_negatives(missed, transcript)
    else:
        fn = {url: result.fn_classification.get(url, NON_RETRIEVED) for url in sorted(missed)}
    return result.model_copy(
        update={
            "category": task.category,
            "cr": score.cr,
            "precision": score.precision,
            "recall": score.recall,
            "f1": score.f1,
            "fn_classification": fn,
        }
    )


def write_results(results: Iterable[TaskResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for result in results:
            f.write(result.model_dump_json() + "\n")
    return path


def load_results(path: Union[str, Path]) -> List[TaskResult]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"results file not found: {path}")
    results = []
    with path.open(encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                results.append(TaskResult.model_validate_json(line))
            except ValidationError as e:
                raise EvaluationError(f"{path}: line {line_number}: invalid result: {e}") from e
    return results


# -- aggregation --------------------------------------------------------------


class Metrics(BaseModel):
    tasks: int
    cr: float
    precision: float
    recall: float
    f1: float
    input_tokens: float
    output_tokens: float
    cost: float
    runtime_seconds: float
    search_calls: float
    steps: float

    @property
    def total_tokens(self) -> float:
        return self.input_tokens + self.output_tokens


class CellSummary(Metrics):
    """Micro averages over the tasks of one interface x model (x category) cell."""

    interface: str
    model: str
    category: Optional[str] = None


class InterfaceSummary(Metrics):
    """Macro averages over the model cells of one interface (x category)."""

    interface: str
    category: Optional[str] = None
    models: int
    fn_retrieved: int = 0
    fn_non_retrieved: int = 0


class ScatterPoint(BaseModel):
    interface: str
    model: str
    cost: float
    f1: float


class Report(BaseModel):
    cells: List[CellSummary]
    interfaces: List[InterfaceSummary]
    category_cells: List[CellSummary] = Field(default_factory=list)
    category_interfaces: List[InterfaceSummary] = Field(default_factory=list)
    scatter: List[ScatterPoint] = Field(default_factory=list)


METRIC_COLUMNS = (
    "cr", "precision", "recall", "f1", "input_tokens", "output_tokens",
    "cost", "runtime_seconds", "search_calls", "steps",
)

_SCHEMA = """
CREATE TABLE results (
    task_id VARCHAR, category VARCHAR, interface VARCHAR, model VARCHAR,
    cr DOUBLE, "precision" DOUBLE, recall DOUBLE, f1 DOUBLE,
    input_tokens DOUBLE, output_tokens DOUBLE, cost DOUBLE, runtime_seconds DOUBLE,
    search_calls DOUBLE, steps DOUBLE, fn_retrieved BIGINT, fn_non_retrieved BIGINT
)
"""


def _load_table(results: List[TaskResult]) -> duckdb.DuckDBPyConnection:
    con = duckdb.connect(":memory:")
    con.execute(_SCHEMA)
    rows = []
    for r in results:
        labels = list(r.fn_classification.values())
        rows.append((
            r.task_id, r.category, r.interface, r.model,
            float(r.cr), r.precision, r.recall, r.f1,
            float(r.input_tokens), float(r.output_tokens), r.cost, r.runtime_seconds,
            float(r.search_calls), float(r.steps),
            labels.count(RETRIEVED), labels.count(NON_RETRIEVED),
        ))
    con.executemany(f"INSERT INTO results VALUES ({', '.join('?' * 16)})", rows)
    return con


def _averages() -> str:
    return ", ".join(f'AVG("{c}") AS "{c}"' for c in METRIC_COLUMNS)


def _cells(con: duckdb.DuckDBPyConnection, by_category: bool) -> List[CellSummary]:
    keys = "category, interface, model" if by_category else "interface, model"
    query = f"SELECT {keys}, COUNT(*) AS tasks, {_averages()} FROM results GROUP BY {keys} ORDER BY {keys}"
    cursor = con.execute(query)
    columns = [d[0] for d in cursor.description]
    return [CellSummary(**dict(zip(columns, row))) for row in cursor.fetchall()]


def _interfaces(con: duckdb.DuckDBPyConnection, by_category: bool) -> List[InterfaceSummary]:
    cell_keys = "category, interface, model" if by_category else "interface, model"
    keys = "category, interface" if by_category else "interface"
    query = f"""
        WITH cells AS (
            SELECT {cell_keys}, COUNT(*) AS tasks, {_averages()},
                   SUM(fn_retrieved) AS fn_retrieved, SUM(fn_non_retrieved) AS fn_non_retrieved
            FROM results GROUP BY {cell_keys}
        )
        SELECT {keys}, COUNT(*) AS models, CAST(SUM(tasks) AS BIGINT) AS tasks, {_averages()},
               CAST(SUM(fn_retrieved) AS BIGINT) AS fn_retrieved,
               CAST(SUM(fn_non_retrieved) AS BIGINT) AS fn_non_retrieved
        FROM cells GROUP BY {keys} ORDER BY {keys}
    """
    cursor = con.execute(query)
    columns = [d[0] for d in cursor.description]
    return [InterfaceSummary(**dict(zip(columns, row))) for row in cursor.fetchall()]


def aggregate(results: Iterable[TaskResult]) -> Report:
    """
    Aggregate task results into a report.

    :param results: scored task results
    :return: per-cell micro averages, per-interface macro averages, the same
        split by task category, and (mean cost, mean F1) scatter points
    :raises EvaluationError: if there are no results
    """
    results = list(results)
    if not results:
        raise EvaluationError("no results to aggregate")
    con = _load_table(results)
    try:
        cells = _cells(con, by_category=False)
        report = Report(
            cells=cells,
            interfaces=_interfaces(con, by_category=False),
            category_cells=_cells(con, by_category=True),
            category_interfaces=_interfaces(con, by_category=True),
            scatter=[ScatterPoint(interface=c.interface, model=c.model, cost=c.cost, f1=c.f1) for c in cells],
        )
    finally:
        con.close()
    logger.info(f"Aggregated {len(results)} results into {len(report.cells)} interface x model cells")
    return report


# -- rendering ---------------------------------------------------------------


def _table(headers: List[str], rows: List[List[str]]) -> List[str]:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return lines


def _f(value: float, digits: int = 2) -> str:
    return f"{value:.{digits}f}"


def _tokens(value: float) -> str:
    return f"{value:,.0f}"


def render_markdown(report: Report) -> str:
    out = ["# Results", "", "## Average performance per agent", ""]
    out += _table(
        ["Interface", "Models", "Tasks", "CR", "P", "R", "F1"],
        [[s.interface, str(s.models), str(s.tasks), _f(s.cr), _f(s.precision), _f(s.recall), _f(s.f1)]
         for s in report.interfaces],
    )
    out += ["", "## Results per interface and model", ""]
    out += _table(
        ["Interface", "Model", "Tasks", "CR", "P", "R", "F1", "Tokens", "Cost ($)", "Runtime (s)"],
        [[c.interface, c.model, str(c.tasks), _f(c.cr), _f(c.precision), _f(c.recall), _f(c.f1),
          _tokens(c.total_tokens), _f(c.cost, 4), _f(c.runtime_seconds, 1)] for c in report.cells],
    )

    categories = sorted({c.category for c in report.category_cells if c.category})
    if categories:
        out += ["", "## F1 per task set", ""]
        interfaces = [s.interface for s in report.interfaces]
        by_key = {(s.category, s.interface): s for s in report.category_interfaces}
        out += _table(
            ["Task set"] + interfaces,
            [[cat] + [_f(by_key[(cat, i)].f1) if (cat, i) in by_key else "-" for i in interfaces]
             for cat in categories],
        )
        for cat in categories:
            out += ["", f"## Task set: {cat}", ""]
            out += _table(
                ["Interface", "Model", "Tasks", "CR", "P", "R", "F1", "Tokens", "Cost ($)", "Runtime (s)"],
                [[c.interface, c.model, str(c.tasks), _f(c.cr), _f(c.precision), _f(c.recall), _f(c.f1),
                  _tokens(c.total_tokens), _f(c.cost, 4), _f(c.runtime_seconds, 1)]
                 for c in report.category_cells if c.category == cat],
            )

    out += ["", "## Efficiency", ""]
    rows = []
    for summary in report.interfaces:
        for c in report.cells:
            if c.interface == summary.interface:
                rows.append([c.interface, c.model, _tokens(c.total_tokens), _f(c.cost, 4),
                             _f(c.runtime_seconds, 1), _f(c.search_calls, 1), _f(c.steps, 1)])
        rows.append([summary.interface, "Average", _tokens(summary.total_tokens), _f(summary.cost, 4),
                     _f(summary.runtime_seconds, 1), _f(summary.search_calls, 1), _f(summary.steps, 1)])
    out += _table(["Interface", "Model", "Tokens", "Cost ($)", "Runtime (s)", "Searches", "Steps"], rows)

    out += ["", "## False negatives", ""]
    out += _table(
        ["Interface", "Retrieved", "Non-retrieved", "Total"],
        [[s.interface, str(s.fn_retrieved), str(s.fn_non_retrieved), str(s.fn_retrieved + s.fn_non_retrieved)]
         for s in report.interfaces],
    )
    return "\n".join(out) + "\n"


def render_scatter_csv(report: Report) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["interface", "model", "cost", "f1"])
    for point in report.scatter:
        writer.writerow([point.interface, point.model, repr(point.cost), repr(point.f1)])
    return buffer.getvalue()


def render_report(report: Report, fmt: Literal["json", "markdown", "csv"] = "markdown") -> str:
    """
    Render a report as JSON, markdown tables, or the (interface, model, cost, f1) scatter CSV.

    :raises EvaluationError: for any other format
    """
    if fmt == "json":
        return report.model_dump_json(indent=2) + "\n"
    if fmt in ("markdown", "md"):
        return render_markdown(report)
    if fmt == "csv":
        return render_scatter_csv(report)
    raise EvaluationError(f"unsupported report format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}")


def write_report(report: Report, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, fmt in (("report.json", "json"), ("report.md", "markdown"), ("scatter.csv", "csv")):
        path = out_dir / name
        path.write_text(render_report(report, fmt), encoding="utf-8")
        written.append(path)
        logger.info(f"Wrote {path}")
    return written


def report_without_runtime(report: Report) -> Dict[str, object]:
    """The report as a dict with runtime fields removed, for determinism comparisons."""
    data = json.loads(report.model_dump_json())
    for key in ("cells", "interfaces", "category_cells", "category_interfaces"):
        for row in data[key]:
            row.pop("runtime_seconds", None)
    return data
