import json

import pytest

from webmall_bench.errors import ConfigError, EvaluationError
from webmall_bench.tasks import CATEGORIES, GoldState, UrlSet, load_tasks, parse_task_record, resolve_placeholders


def test_bundled_tasks(tasks):
    assert len(tasks) == 12
    assert {t.category for t in tasks} == set(CATEGORIES)
    assert [t.task_id for t in tasks if t.is_transactional] == [
        "transactional-01", "transactional-02", "transactional-03"
    ]


def test_placeholders_are_resolved(tasks, catalog):
    by_id = {t.task_id: t for t in tasks}
    assert catalog.get("D-030").url in by_id["vague-02"].prompt
    assert "{offer_url" not in by_id["transactional-01"].prompt
    assert by_id["specific-01"].gold.urls == [catalog.get(o).url for o in ("D-001", "D-016", "D-031")]


def test_unknown_placeholder(catalog):
    with pytest.raises(EvaluationError):
        resolve_placeholders("see {offer_url:NOPE}", catalog)
    with pytest.raises(EvaluationError):
        resolve_placeholders("see {offer_url:D-001}", None)


def test_gold_urls_are_normalized(catalog):
    task = parse_task_record({"task_id": "t", "category": "specific", "prompt": "p",
                              "gold": {"urls": ["HTTP://LOCALHOST:9081/product/D-001/"]}}, catalog)
    assert isinstance(task.gold, UrlSet)
    assert task.gold.urls == ["http://localhost:9081/product/D-001"]


def test_empty_answer_tasks_must_opt_in(catalog):
    with pytest.raises(EvaluationError):
        parse_task_record({"task_id": "t", "category": "vague", "prompt": "p", "gold": {"urls": []}}, catalog)
    task = parse_task_record({"task_id": "t", "category": "vague", "prompt": "p", "gold": {"allow_empty": True}})
    assert task.gold.urls == []


def test_transactional_gold_needs_carts_or_orders():
    with pytest.raises(EvaluationError):
        parse_task_record({"task_id": "t", "category": "transactional", "prompt": "p", "gold": {}})
    task = parse_task_record({"task_id": "t", "category": "transactional", "prompt": "p",
                              "gold": {"orders": {"shop1": [{"D-001": 1}]}}})
    assert isinstance(task.gold, GoldState) and task.gold.carts is None


@pytest.mark.parametrize(
    "lines",
    [
        ["not json"],
        ['{"task_id": "t", "category": "weird", "prompt": "p", "gold": {"offers": ["D-001"]}}'],
        ['{"task_id": "t", "category": "specific", "prompt": "p", "gold": {"offers": ["D-001"]}}'] * 2,
        ['{"category": "specific", "prompt": "p", "gold": {"offers": ["D-001"]}}'],
    ],
)
def test_bad_task_files(tmp_path, catalog, lines):
    path = tmp_path / "tasks.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(EvaluationError):
        load_tasks(path, catalog)


def test_missing_task_file(tmp_path):
    with pytest.raises(ConfigError):
        load_tasks(tmp_path / "missing.jsonl")


def test_blank_lines_are_skipped(tmp_path, catalog):
    path = tmp_path / "tasks.jsonl"
    record = {"task_id": "t", "category": "cheapest", "prompt": "p", "gold": {"offers": ["D-019"]}}
    path.write_text("\n" + json.dumps(record) + "\n\n")
    assert [t.task_id for t in load_tasks(path, catalog)] == ["t"]
