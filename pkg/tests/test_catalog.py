import json

import pytest

from webmall_bench.catalog import (
    Catalog,
    Offer,
    catalog_stats,
    default_shops,
    demo_manifest,
    find_shop,
    load_catalog,
    load_shops,
    normalize_url,
    offer_by_url,
)
from webmall_bench.errors import CatalogError, ConfigError, NormalizationError


def _write_lines(path, records):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


def _record(offer_id, shop_id="shop1", **extra):
    record = {"offer_id": offer_id, "shop_id": shop_id, "name": f"Item {offer_id}", "price": "10.00",
              "priceCurrency": "USD"}
    record.update(extra)
    return record


def test_demo_catalog_matches_manifest(catalog):
    manifest = demo_manifest()
    stats = catalog_stats(catalog)
    assert stats.total_offers == manifest["total_offers"] == len(catalog)
    assert stats.offers_per_shop == manifest["offers_per_shop"]


def test_demo_offers_live_under_their_shop(catalog):
    for offer in catalog.offers:
        shop = catalog.shop_for_url(offer.url)
        assert shop is not None and shop.shop_id == offer.shop_id


@pytest.mark.parametrize(
    "url,expected",
    [
        ("HTTP://LocalHost:80/a/", "http://localhost/a"),
        ("http://localhost:9081/product/D-001/", "http://localhost:9081/product/D-001"),
        ("http://example.com/a#frag", "http://example.com/a"),
        ("http://example.com/%7Euser", "http://example.com/~user"),
        ("http://example.com/a%2fb", "http://example.com/a%2Fb"),
        ("http://example.com", "http://example.com/"),
        ("https://Example.COM:443/x?q=1", "https://example.com/x?q=1"),
    ],
)
def test_normalize_url(url, expected):
    assert normalize_url(url) == expected


@pytest.mark.parametrize("url", ["not a url", "/product/D-001", "", "http://"])
def test_normalize_url_rejects_relative_or_garbage(url):
    with pytest.raises(NormalizationError):
        normalize_url(url)


def test_normalize_url_is_idempotent(catalog):
    for offer in catalog.offers:
        once = normalize_url(offer.url + "/")
        assert normalize_url(once) == once


def test_lookup_by_url(catalog):
    offer = catalog.get("D-017")
    assert offer_by_url(catalog, offer.url) == offer
    assert offer_by_url(catalog, offer.url + "/") == offer
    assert offer_by_url(catalog, "http://localhost:9081/product/NOPE") is None
    assert offer_by_url(catalog, "garbage") is None


def test_find_shop():
    shops = default_shops()
    assert find_shop(shops, "http://localhost:9082/cart").shop_id == "shop2"
    assert find_shop(shops, "http://localhost:9084").shop_id == "shop4"
    assert find_shop(shops, "http://localhost:9999/product/D-001") is None
    assert find_shop(shops, "not a url") is None


def test_default_shops_ports():
    shops = default_shops(ports_base=7000)
    assert [s.base_url for s in shops] == [f"http://localhost:{7000 + i}" for i in range(1, 5)]


def test_load_catalog_derives_urls_and_cents(tmp_path):
    path = _write_lines(tmp_path / "c.jsonl", [_record("A-1", price="19.99", category="Storage", color="red")])
    catalog = load_catalog(path)
    offer = catalog.get("A-1")
    assert offer.price_cents == 1999
    assert offer.url == "http://localhost:9081/product/A-1"
    assert offer.category_path == ("Storage",)
    assert offer.extra == {"color": "red"}


@pytest.mark.parametrize(
    "records,line_number",
    [
        ([_record("A-1"), _record("A-1")], 2),
        ([_record("A-1"), _record("A-2", shop_id="shop9")], 2),
        (["{not json"], 1),
        ([_record("A-1", price="-1")], 1),
        ([{"offer_id": "A-1", "shop_id": "shop1", "price": "1", "priceCurrency": "USD"}], 1),
        ([_record("A-1", url="http://localhost:9082/product/A-1")], 1),
        ([_record("A-1", url="http://localhost:9081/x"), _record("A-2", url="http://localhost:9081/x/")], 2),
    ],
)
def test_load_catalog_errors_carry_line_numbers(tmp_path, records, line_number):
    path = _write_lines(tmp_path / "c.jsonl", records)
    with pytest.raises(CatalogError) as info:
        load_catalog(path)
    assert info.value.line_number == line_number


def test_load_catalog_missing_file(tmp_path):
    with pytest.raises(CatalogError):
        load_catalog(tmp_path / "missing.jsonl")


def test_overlapping_shop_urls_rejected():
    shops = default_shops()
    overlapping = shops + [shops[0].model_copy(update={"shop_id": "shop5"})]
    with pytest.raises(CatalogError):
        Catalog(overlapping, [])


def test_categories_are_sorted_prefixes(catalog):
    categories = catalog.categories("shop1")
    assert categories == sorted(categories)
    for path in categories:
        assert path[:-1] in categories or len(path) == 1


def test_load_shops(tmp_path):
    path = tmp_path / "shops.json"
    path.write_text(json.dumps([{"shop_id": "s", "display_name": "S", "base_url": "http://127.0.0.1:8001"}]))
    assert load_shops(path)[0].netloc == "127.0.0.1:8001"
    with pytest.raises(ConfigError):
        load_shops(tmp_path / "nope.json")


def test_offer_price_helpers():
    offer = Offer(offer_id="x", shop_id="shop1", title="t", price_cents=19905, currency="USD",
                  url="http://localhost:9081/product/x")
    assert offer.price_decimal == "199.05"
    assert offer.price_float == pytest.approx(199.05)
