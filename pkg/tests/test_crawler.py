import httpx
import pytest

from webmall_bench.catalog import default_shops
from webmall_bench.crawler import crawl_mall, crawl_shop, internal_links, rag_documents
from webmall_bench.errors import NetworkError
from webmall_bench.search_index import index_docs, search


def test_crawl_reaches_every_offer(client, catalog):
    pages = crawl_mall(client, catalog.shops)
    docs = rag_documents(pages, catalog)
    covered = {d.offer_id for d in docs if d.offer_id}
    assert covered == {o.offer_id for o in catalog.offers}
    assert len(docs) >= len(catalog)
    assert len({d.doc_id for d in docs}) == len(docs)


def test_crawl_skips_transactional_routes(client, catalog):
    pages = crawl_shop(client, catalog.shop("shop1"))
    for page in pages:
        path = httpx.URL(page.url).path
        assert not path.startswith(("/cart", "/checkout", "/search", "/api", "/admin", "/mcp", "/nlweb"))
        assert page.shop_id == "shop1"


def test_crawl_is_deterministic(client, catalog):
    first = [p.url for p in crawl_shop(client, catalog.shop("shop3"))]
    second = [p.url for p in crawl_shop(client, catalog.shop("shop3"))]
    assert first == second


def test_max_pages(client, catalog):
    assert len(crawl_shop(client, catalog.shop("shop2"), max_pages=3)) == 3


def test_internal_links_stay_in_the_shop():
    shop = default_shops()[0]
    html = ('<a href="/product/D-001">a</a><a href="http://localhost:9082/product/D-016">b</a>'
            '<a href="/cart">c</a><a href="/product/D-001#top">d</a><a href="mailto:x@y.z">e</a>')
    assert internal_links(html, "http://localhost:9081/", shop) == ["http://localhost:9081/product/D-001"]


def test_unreachable_shop_raises():
    def refuse(request):
        raise httpx.ConnectError("connection refused", request=request)

    with httpx.Client(transport=httpx.MockTransport(refuse)) as http:
        with pytest.raises(NetworkError):
            crawl_shop(http, default_shops()[0])


def test_rag_index_finds_product_pages(client, catalog):
    index = index_docs(rag_documents(crawl_mall(client, catalog.shops), catalog))
    hits = search(index, catalog.get("D-019").title, 5)
    assert "http://localhost:9082/product/D-019" in [h.doc.source_url for h in hits]
