"""
Breadth-first crawler over the HTML storefronts, feeding the RAG index.

Starting from each shop's home page, internal ``<a href>`` links are followed
level by level in sorted order, so the crawl (and the index built from it) is
deterministic. Transactional and API routes are never fetched.
"""

import logging
from typing import Iterable, List, Optional, Set
from urllib.parse import urljoin, urlsplit

import httpx
from bs4 import BeautifulSoup
from pydantic import BaseModel

from webmall_bench.catalog import Catalog, Shop, normalize_url
from webmall_bench.errors import NetworkError, NormalizationError
from webmall_bench.search_index import DocInput, clean_html

logger = logging.getLogger(__name__)

SKIP_PREFIXES = ("/cart", "/checkout", "/order", "/search", "/api", "/admin", "/mcp", "/nlweb")
DEFAULT_MAX_PAGES = 5000


class CrawledPage(BaseModel):
    url: str
    shop_id: str
    html: str


def _skipped(path: str) -> bool:
    return any(path == p or path.startswith(p + "/") for p in SKIP_PREFIXES)


def internal_links(html: str, page_url: str, shop: Shop) -> List[str]:
    """Canonical URLs of crawlable links on a page that stay inside ``shop``."""
    soup = BeautifulSoup(html, "html.parser")
    found: Set[str] = set()
    for a in soup.find_all("a", href=True):
        try:
            url = normalize_url(urljoin(page_url, a["href"]))
        except NormalizationError:
            continue
        if not (url.startswith(shop.url_prefix) or url + "/" == shop.url_prefix):
            continue
        if _skipped(urlsplit(url).path):
            continue
        found.add(url)
    return sorted(found)


def crawl_shop(http: httpx.Client, shop: Shop, max_pages: int = DEFAULT_MAX_PAGES) -> List[CrawledPage]:
    """
    Crawl one shop.

    :param http: client used for all requests
    :param shop: shop to crawl
    :param max_pages: stop after this many pages
    :return: pages in crawl order
    :raises NetworkError: if the home page cannot be fetched
    """
    start = normalize_url(shop.base_url)
    seen = {start}
    frontier = [start]
    pages: List[CrawledPage] = []

    while frontier and len(pages) < max_pages:
        next_level: Set[str] = set()
        for url in frontier:
            if len(pages) >= max_pages:
                break
            try:
                response = http.get(url)
            except httpx.HTTPError as e:
                if url == start:
                    raise NetworkError(f"shop {shop.shop_id} unreachable at {url}: {e}") from e
                logger.warning(f"Skipping {url}: {e}")
                continue
            if response.status_code != 200:
                if url == start:
                    raise NetworkError(f"shop {shop.shop_id} answered HTTP {response.status_code} at {url}")
                logger.warning(f"Skipping {url}: HTTP {response.status_code}")
                continue
            if "html" not in response.headers.get("content-type", ""):
                continue
            pages.append(CrawledPage(url=url, shop_id=shop.shop_id, html=response.text))
            for link in internal_links(response.text, url, shop):
                if link not in seen:
                    seen.add(link)
                    next_level.add(link)
        frontier = sorted(next_level)

    logger.info(f"Crawled {len(pages)} pages from {shop.shop_id}")
    return pages


def crawl_mall(
    http: httpx.Client, shops: Iterable[Shop], max_pages: int = DEFAULT_MAX_PAGES
) -> List[CrawledPage]:
    pages: List[CrawledPage] = []
    for shop in shops:
        pages.extend(crawl_shop(http, shop, max_pages))
    return pages


def rag_documents(pages: Iterable[CrawledPage], catalog: Optional[Catalog] = None) -> List[DocInput]:
    """One document per crawled page; product pages carry their offer_id."""
    docs = []
    for page in pages:
        offer = catalog.lookup_url(page.url) if catalog is not None else None
        docs.append(
            DocInput(
                doc_id=page.url,
                shop_id=page.shop_id,
                offer_id=offer.offer_id if offer else None,
                source_url=page.url,
                text=clean_html(page.html),
            )
        )
    return docs
