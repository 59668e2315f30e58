import pytest

from webmall_bench.catalog import Catalog, Offer, default_shops, product_url
from webmall_bench.jsonrpc import INVALID_PARAMS, METHOD_NOT_FOUND, CallContext, JsonRpcError
from webmall_bench.mall import Mall
from webmall_bench.search_index import build_offer_index, search
from webmall_bench.shop_mcp import SEARCH_SCHEMAS, list_tools
from webmall_bench.shop_nlweb import NLWEB_TOOLS, ask

SHIPPING = {"name": "Jane Doe", "street": "1 Main Street", "city": "Springfield", "postal_code": "12345",
            "country": "US"}
CARD = "4111111111111111"


def oracle_top(offer_index, shop_id, query, k):
    return [h.doc.offer_id for h in search(offer_index, query, k, shop_filter=shop_id)]


def _call(server, name, args, run_tag=None):
    outcome = server.call_tool(name, args, CallContext(run_tag=run_tag))
    assert not isinstance(outcome, JsonRpcError), outcome
    return outcome


@pytest.mark.parametrize("shop_id", ["shop1", "shop2", "shop3", "shop4"])
def test_search_tools_match_the_offer_index(mall, offer_index, shop_id):
    tool, query_key, limit_key, wrap, id_field, url_field = SEARCH_SCHEMAS[shop_id]
    outcome = _call(mall.mcp_servers[shop_id], tool, {query_key: "ryzen", limit_key: 5})
    items = outcome.content[wrap]
    assert [item[id_field] for item in items] == oracle_top(offer_index, shop_id, "ryzen", 5)
    for item in items:
        assert mall.catalog.get(item[id_field]).url == item[url_field]


def _large_catalog(shop_id, size):
    shops = default_shops()
    shop = next(s for s in shops if s.shop_id == shop_id)
    offers = [
        Offer(offer_id=f"L-{i:03d}", shop_id=shop_id, title=f"Ryzen build kit {i}",
              description=f"Processor bundle number {i}", price_cents=10_000 + i, currency="USD",
              url=product_url(shop, f"L-{i:03d}"))
        for i in range(size)
    ]
    return Catalog(shops, offers)


@pytest.mark.parametrize("shop_id", ["shop1", "shop2", "shop3", "shop4"])
def test_search_limit_is_not_capped(shop_id):
    catalog = _large_catalog(shop_id, 80)
    mall = Mall(catalog)
    tool, query_key, limit_key, wrap, id_field, _ = SEARCH_SCHEMAS[shop_id]
    items = _call(mall.mcp_servers[shop_id], tool, {query_key: "ryzen", limit_key: 75}).content[wrap]
    assert len(items) == 75
    assert [item[id_field] for item in items] == oracle_top(build_offer_index(catalog), shop_id, "ryzen", 75)


def test_shop_schemas_differ(mall):
    names = {shop_id: {t.name for t in list_tools(server)} for shop_id, server in mall.mcp_servers.items()}
    assert len(names) == 4
    for shop_id, tools in names.items():
        assert len(tools) == 5
        for other, other_tools in names.items():
            if other != shop_id:
                assert SEARCH_SCHEMAS[shop_id][0] not in other_tools


@pytest.mark.parametrize(
    "shop_id,expected",
    [
        ("shop1", {"product_id", "name", "price_usd", "url"}),
        ("shop2", {"id", "title", "cost_cents", "currency", "link"}),
        ("shop3", {"sku", "label", "price", "page"}),
        ("shop4", {"ref", "title", "price", "href"}),
    ],
)
def test_result_shapes(mall, shop_id, expected):
    tool, query_key, limit_key, wrap, _, _ = SEARCH_SCHEMAS[shop_id]
    items = _call(mall.mcp_servers[shop_id], tool, {query_key: "keyboard", limit_key: 2}).content[wrap]
    assert items and set(items[0]) == expected


def test_prices_follow_each_shop_convention(mall, catalog):
    offer = catalog.get("D-016")
    item = _call(mall.mcp_servers["shop2"], "offer_details", {"id": "D-016"}).content
    assert item["cost_cents"] == offer.price_cents
    offer = catalog.get("D-046")
    item = _call(mall.mcp_servers["shop4"], "describe", {"ref": "D-046"}).content
    assert item["price"] == {"amount": offer.price_decimal, "currency": "USD"}


def test_negative_limit_is_invalid_params(mall):
    outcome = mall.mcp_servers["shop1"].call_tool("search_products", {"query": "x", "max_results": -1})
    assert isinstance(outcome, JsonRpcError) and outcome.code == INVALID_PARAMS
    assert _call(mall.mcp_servers["shop1"], "search_products", {"query": "x", "max_results": 0}).content == {"items": []}


def test_unknown_tool(mall):
    outcome = mall.mcp_servers["shop3"].call_tool("search_products", {"query": "x"})
    assert isinstance(outcome, JsonRpcError) and outcome.code == METHOD_NOT_FOUND


def test_detail_of_foreign_offer_is_tool_error(mall):
    outcome = _call(mall.mcp_servers["shop1"], "get_product", {"product_id": "D-016"})
    assert outcome.is_error


@pytest.mark.parametrize(
    "shop_id,open_tool,session_key,add_tool,add_args,buy_tool,buy_args",
    [
        ("shop1", "create_session", "session", "add_item", {"product_id": "D-003", "qty": 2},
         "checkout", {"shipping": SHIPPING, "card": CARD}),
        ("shop2", "new_cart", "cart", "put_in_cart", {"id": "D-017", "count": 2},
         "purchase", {"ship_to": SHIPPING, "payment": {"card_number": CARD}}),
        ("shop3", "open_session", "sid", "cart_add", {"sku": "D-033", "n": 2},
         "finalize", {"address": SHIPPING, "card_no": CARD}),
        ("shop4", "begin", "token", "add", {"ref": "D-049", "qty": 2},
         "complete_order", {"delivery": SHIPPING, "pay": {"card_number": CARD}}),
    ],
)
def test_checkout_through_every_schema(mall, shop_id, open_tool, session_key, add_tool, add_args, buy_tool, buy_args):
    server = mall.mcp_servers[shop_id]
    session = _call(server, open_tool, {}, run_tag=f"mcp-{shop_id}").content[session_key]
    _call(server, add_tool, {session_key: session, **add_args})
    order = _call(server, buy_tool, {session_key: session, **buy_args})
    assert not order.is_error, order.content
    offer_id = next(v for k, v in add_args.items() if isinstance(v, str))
    snapshot = mall.store.snapshot_run(f"mcp-{shop_id}")
    assert snapshot.orders == {shop_id: [{offer_id: 2}]}


def test_nlweb_tool_list_is_uniform(mall):
    expected = [t.name for t in NLWEB_TOOLS]
    for server in mall.nlweb_servers.values():
        assert [t.name for t in list_tools(server)] == expected


@pytest.mark.parametrize("shop_id", ["shop1", "shop2", "shop3", "shop4"])
def test_ask_matches_mcp_search(mall, offer_index, shop_id):
    items = ask(mall.nlweb_servers[shop_id], "ryzen", 5)
    offers = [mall.catalog.get(o) for o in oracle_top(offer_index, shop_id, "ryzen", 5)]
    assert [item["url"] for item in items] == [o.url for o in offers]
    for item in items:
        assert item["@type"] == "Product"
        assert item["offers"]["@type"] == "Offer"
        assert item["offers"]["priceCurrency"] == "USD"


def test_nlweb_cart_by_url(mall, catalog):
    server = mall.nlweb_servers["shop4"]
    session = _call(server, "create_session", {}, run_tag="nlweb-test").content["session"]
    cart = _call(server, "add_to_cart", {"session": session, "url": catalog.get("D-047").url + "/"}).content
    assert cart["items"][0]["orderedItem"]["sku"] == "D-047"
    order = _call(server, "checkout", {"session": session, "shipping": SHIPPING,
                                        "payment": {"card_number": CARD}}).content
    assert order["@type"] == "Order"
    assert order["orderedItem"][0]["orderQuantity"] == 1
    foreign = _call(server, "add_to_cart", {"session": session, "url": catalog.get("D-001").url})
    assert foreign.is_error


def test_mcp_and_nlweb_are_reachable_over_http(client):
    body = {"jsonrpc": "2.0", "id": 1, "method": "tools/call",
            "params": {"name": "ask", "arguments": {"query": "xbox", "limit": 3}}}
    reply = client.post("http://localhost:9082/nlweb", json=body).json()
    urls = [item["url"] for item in reply["result"]["structuredContent"]]
    assert "http://localhost:9082/product/D-019" in urls
