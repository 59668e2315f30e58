import pytest

from webmall_bench.search_index import clean_html, tokenize
from webmall_bench.shop_html import (
    SESSION_COOKIE,
    extract_page_model,
    format_price,
    handle_search,
    lexical_search,
    render_product_page,
)

from conftest import SHOP_URLS

SHIPPING_FORM = {"name": "Jane Doe", "street": "1 Main Street", "city": "Springfield", "postal_code": "12345",
                 "country": "US", "card_number": "4111111111111111"}


@pytest.mark.parametrize(
    "cents,currency,expected",
    [(19900, "USD", "$199.00"), (123456, "EUR", "€1,234.56"), (5, "CHF", "0.05 CHF")],
)
def test_format_price(cents, currency, expected):
    assert format_price(cents, currency) == expected


def test_product_page_contains_offer_and_add_to_cart_form(catalog):
    offer = catalog.get("D-003")
    html = render_product_page(catalog, offer)
    page = extract_page_model(html, offer.url)
    assert offer.title in page.main_text
    text = clean_html(html)
    assert offer.description in text
    assert "<" not in text and ">" not in text
    add = page.forms[1]
    assert add.method == "POST" and add.action == f"{SHOP_URLS['shop1']}/cart/add"
    assert {f.name: f.value for f in add.fields} == {"offer_id": "D-003", "quantity": "1"}
    assert page.forms[0].action == f"{SHOP_URLS['shop1']}/search"


def test_breadcrumb_links_are_navigable(catalog):
    offer = catalog.get("D-003")
    page = extract_page_model(render_product_page(catalog, offer), offer.url)
    hrefs = [link.href for link in page.content_links]
    assert f"{SHOP_URLS['shop1']}/" in hrefs
    assert any("/category/pc-components" in href for href in hrefs)


def test_search_ranks_unique_title_first(catalog):
    for offer in catalog.offers:
        hits = lexical_search(catalog, offer.shop_id, offer.title)
        assert hits[0].offer_id == offer.offer_id


@pytest.mark.parametrize("shop_id", ["shop1", "shop2", "shop3", "shop4"])
def test_search_page_lists_exactly_the_matching_offers(catalog, shop_id):
    expected = [
        o.url for o in catalog.offers_for_shop(shop_id)
        if "wireless" in tokenize(f"{o.title} {o.description}")
    ]
    page = extract_page_model(handle_search(catalog, shop_id, "wireless"), f"{SHOP_URLS[shop_id]}/search?q=wireless")
    product_links = [link.href for link in page.content_links if "/product/" in link.href]
    assert sorted(product_links) == sorted(expected)


def test_empty_query_finds_nothing(catalog):
    assert lexical_search(catalog, "shop1", "") == []
    assert lexical_search(catalog, "shop1", "!!!") == []


def test_pages_are_served_per_host(client, catalog):
    for shop_id, base in SHOP_URLS.items():
        response = client.get(f"{base}/")
        assert response.status_code == 200
        assert catalog.shop(shop_id).display_name in response.text
    assert client.get("http://localhost:9999/").status_code == 404


def test_unknown_product_and_foreign_product_are_404(client):
    assert client.get(f"{SHOP_URLS['shop1']}/product/NOPE").status_code == 404
    assert client.get(f"{SHOP_URLS['shop1']}/product/D-016").status_code == 404


def test_category_pages_list_offers(client, catalog):
    home = extract_page_model(client.get(f"{SHOP_URLS['shop2']}/").text, f"{SHOP_URLS['shop2']}/")
    category_links = [link.href for link in home.content_links if "/category/" in link.href]
    assert category_links
    seen = set()
    for url in category_links:
        page = extract_page_model(client.get(url).text, url)
        seen.update(link.href for link in page.content_links if "/product/" in link.href)
    assert seen == {o.url for o in catalog.offers_for_shop("shop2")}


def test_cart_and_checkout_through_forms(client, mall):
    base = SHOP_URLS["shop2"]
    assert client.get(f"{base}/product/D-017").cookies.get(SESSION_COOKIE) is None
    cart = client.post(f"{base}/cart/add", data={"offer_id": "D-017", "quantity": "2"},
                       headers={"X-Run-Id": "html-test"})
    assert cart.status_code == 200
    session_id = cart.cookies.get(SESSION_COOKIE)
    assert session_id
    headers = {"Cookie": f"{SESSION_COOKIE}={session_id}"}
    page = extract_page_model(cart.text, f"{base}/cart/add")
    checkout = page.forms[1]
    assert checkout.action == f"{base}/checkout"
    assert {f.name for f in checkout.fields} == set(SHIPPING_FORM)
    order = client.post(f"{base}/checkout", data=SHIPPING_FORM, headers=headers)
    assert order.status_code == 200
    assert "ORD-shop2-00001" in order.text
    assert session_id not in order.text
    snapshot = mall.store.snapshot_run("html-test")
    assert snapshot.orders == {"shop2": [{"D-017": 2}]}
    assert snapshot.carts == {}


def test_browsing_opens_no_sessions(client, mall):
    base = SHOP_URLS["shop1"]
    for path in ("/", "/search?q=ryzen", "/product/D-001", "/cart"):
        response = client.get(f"{base}{path}")
        assert response.status_code == 200
        assert response.cookies.get(SESSION_COOKIE) is None
    assert client.post(f"{base}/checkout", data=SHIPPING_FORM).status_code == 400
    assert mall.store.session_count() == 0


def test_bad_card_renders_an_error_page(client):
    base = SHOP_URLS["shop1"]
    added = client.post(f"{base}/cart/add", data={"offer_id": "D-001", "quantity": "1"})
    headers = {"Cookie": f"{SESSION_COOKIE}={added.cookies.get(SESSION_COOKIE)}"}
    response = client.post(f"{base}/checkout", data={**SHIPPING_FORM, "card_number": "123"}, headers=headers)
    assert response.status_code == 400
    assert "invalid card number" in response.text


def test_adding_a_foreign_offer_is_rejected(client):
    response = client.post(f"{SHOP_URLS['shop1']}/cart/add", data={"offer_id": "D-016", "quantity": "1"})
    assert response.status_code == 400
