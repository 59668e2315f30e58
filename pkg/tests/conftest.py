import logging

import pytest
from fastapi.testclient import TestClient

from webmall_bench.catalog import demo_catalog_path, demo_tasks_path, load_catalog
from webmall_bench.evaluation import load_pricing
from webmall_bench.mall import Mall
from webmall_bench.search_index import build_offer_index
from webmall_bench.tasks import load_tasks

logging.basicConfig(level=logging.INFO)

SHOP_URLS = {
    "shop1": "http://localhost:9081",
    "shop2": "http://localhost:9082",
    "shop3": "http://localhost:9083",
    "shop4": "http://localhost:9084",
}


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(demo_catalog_path())


@pytest.fixture(scope="session")
def offer_index(catalog):
    return build_offer_index(catalog)


@pytest.fixture(scope="session")
def tasks(catalog):
    return load_tasks(demo_tasks_path(), catalog)


@pytest.fixture(scope="session")
def pricing():
    return load_pricing()


@pytest.fixture
def mall(catalog):
    """A fresh mall (empty session store) per test."""
    return Mall(catalog)


@pytest.fixture
def client(mall):
    with TestClient(mall) as c:
        yield c
