"""
Server-rendered HTML storefront for one shop, and the page model the HTML
agent observes.

Pages are static markup (no scripting) with absolute links. Every page starts
with the same header: a home link, the search form (always form 0) and a cart
link, followed by top-level category navigation.
"""

import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Tuple
from urllib.parse import urlencode, urljoin

from bs4 import BeautifulSoup
from fastapi import APIRouter, Form, Request
from fastapi.responses import HTMLResponse
from jinja2 import Environment, FileSystemLoader, select_autoescape
from pydantic import BaseModel, Field

from webmall_bench.catalog import Catalog, Offer, Shop, normalize_url
from webmall_bench.commerce import RUN_HEADER, CartView, Order, SessionStore
from webmall_bench.errors import CommerceError, EmptyCartError, NormalizationError
from webmall_bench.search_index import clean_html, tokenize

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
SESSION_COOKIE = "webmall_session"
PAGE_SIZE = 20
SEARCH_LIMIT = 20
CURRENCY_SYMBOLS = {"USD": "$", "EUR": "€", "GBP": "£"}

_env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), autoescape=select_autoescape(["html"]))


def format_price(cents: int, currency: str) -> str:
    """``19900, "USD"`` -> ``"$199.00"``; unknown currencies get a code suffix."""
    amount = f"{cents // 100:,}.{cents % 100:02d}"
    symbol = CURRENCY_SYMBOLS.get(currency)
    return f"{symbol}{amount}" if symbol else f"{amount} {currency}"


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "-"


def category_slug(path: Tuple[str, ...]) -> str:
    return "/".join(slugify(p) for p in path)


def lexical_search(catalog: Catalog, shop_id: str, query: str, limit: int = SEARCH_LIMIT) -> List[Offer]:
    """
    Token-AND search over title and description of one shop's offers.

    Every query token must occur in the offer text. Offers are ranked by the
    total number of occurrences of the query tokens, then offer_id.
    """
    terms = sorted(set(tokenize(query or "")))
    if not terms:
        return []
    scored = []
    for offer in catalog.offers_for_shop(shop_id):
        counts = Counter(tokenize(f"{offer.title} {offer.description}"))
        if all(counts[t] for t in terms):
            scored.append((sum(counts[t] for t in terms), offer.offer_id, offer))
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [offer for _, _, offer in scored[:limit]]


class Storefront:
    """Renders the pages of one shop."""

    def __init__(self, shop: Shop, catalog: Catalog):
        self.shop = shop
        self.catalog = catalog
        self.base = shop.base_url.rstrip("/")
        self.categories = catalog.categories(shop.shop_id)
        self._by_slug: Dict[str, Tuple[str, ...]] = {category_slug(c): c for c in self.categories}

    def category_url(self, path: Tuple[str, ...], page: int = 1) -> str:
        url = f"{self.base}/category/{category_slug(path)}"
        if page > 1:
            url += "?" + urlencode({"page": page})
        return url

    def _link(self, path: Tuple[str, ...]) -> Dict[str, str]:
        return {"name": path[-1], "url": self.category_url(path)}

    def _offer_row(self, offer: Offer) -> Dict[str, str]:
        return {"title": offer.title, "url": offer.url, "price": format_price(offer.price_cents, offer.currency)}

    def _render(self, template: str, **context) -> str:
        top = [self._link(c) for c in self.categories if len(c) == 1]
        return _env.get_template(template).render(shop=self.shop, base=self.base, top_categories=top, **context)

    def home(self) -> str:
        categories = [
            {"label": " > ".join(c), "depth": len(c), "url": self.category_url(c)} for c in self.categories
        ]
        return self._render("home.html", categories=categories)

    def category(self, slug_path: str, page: int = 1) -> Optional[str]:
        path = self._by_slug.get(slug_path.strip("/"))
        if path is None:
            return None
        offers = [
            o for o in self.catalog.offers_for_shop(self.shop.shop_id) if o.category_path[:len(path)] == path
        ]
        pages = max(1, (len(offers) + PAGE_SIZE - 1) // PAGE_SIZE)
        if page < 1 or page > pages:
            return None
        subcategories = [self._link(c) for c in self.categories if len(c) == len(path) + 1 and c[:len(path)] == path]
        chunk = offers[(page - 1) * PAGE_SIZE:page * PAGE_SIZE]
        return self._render(
            "category.html",
            category={"name": path[-1]},
            breadcrumb=[self._link(path[:d]) for d in range(1, len(path))],
            subcategories=subcategories,
            offers=[self._offer_row(o) for o in chunk],
            page=page,
            pages=pages,
            prev_url=self.category_url(path, page - 1) if page > 1 else None,
            next_url=self.category_url(path, page + 1) if page < pages else None,
        )

    def product(self, offer: Offer) -> str:
        path = offer.category_path
        return self._render(
            "product.html",
            offer=offer,
            price=format_price(offer.price_cents, offer.currency),
            breadcrumb=[self._link(path[:d]) for d in range(1, len(path) + 1)],
        )

    def search(self, query: str) -> str:
        offers = lexical_search(self.catalog, self.shop.shop_id, query)
        return self._render("search.html", query=query, offers=[self._offer_row(o) for o in offers])

    def cart(self, view: CartView) -> str:
        lines = [
            {
                "title": line.title,
                "url": line.url,
                "quantity": line.quantity,
                "unit_price": format_price(line.unit_price_cents, view.currency),
                "subtotal": format_price(line.subtotal_cents, view.currency),
            }
            for line in view.lines
        ]
        return self._render(
            "cart.html", cart={"lines": lines}, total=format_price(view.total_cents, view.currency)
        )

    def order(self, order: Order) -> str:
        lines = []
        for item in order.items:
            offer = self.catalog.get(item.offer_id)
            lines.append({
                "title": offer.title,
                "url": offer.url,
                "quantity": item.quantity,
                "subtotal": format_price(item.quantity * item.unit_price_cents, order.currency),
            })
        return self._render("order.html", order=order, lines=lines, total=format_price(order.total_cents, order.currency))

    def error(self, message: str) -> str:
        return self._render("error.html", message=message)


def render_product_page(catalog: Catalog, offer: Offer) -> str:
    return Storefront(catalog.shop(offer.shop_id), catalog).product(offer)


def handle_search(catalog: Catalog, shop_id: str, query: str) -> str:
    return Storefront(catalog.shop(shop_id), catalog).search(query)


def html_router(storefront: Storefront, store: SessionStore) -> APIRouter:
    """
    Routes of the HTML storefront, bound to one shop.

    Browsing pages never open a session; the first cart addition does and
    sets the session cookie.
    """
    router = APIRouter()
    shop_id = storefront.shop.shop_id

    def current_session(request: Request) -> Optional[str]:
        session_id = request.cookies.get(SESSION_COOKIE)
        if session_id and store.has_session(session_id):
            return session_id
        return None

    def respond(request: Request, render, status_code: int = 200, open_session: bool = False) -> HTMLResponse:
        session_id = current_session(request)
        is_new = False
        if session_id is None and open_session:
            session_id = store.create_session(run_tag=request.headers.get(RUN_HEADER))
            is_new = True
        try:
            html = render(session_id)
        except CommerceError as e:
            html, status_code = storefront.error(str(e)), 400
        if html is None:
            html, status_code = storefront.error("Page not found"), 404
        response = HTMLResponse(html, status_code=status_code)
        if is_new:
            response.set_cookie(SESSION_COOKIE, session_id, httponly=True, samesite="lax", path="/")
        return response

    @router.get("/", response_class=HTMLResponse)
    def home(request: Request):
        return respond(request, lambda sid: storefront.home())

    @router.get("/category/{slug_path:path}", response_class=HTMLResponse)
    def category(request: Request, slug_path: str, page: str = "1"):
        return respond(request, lambda sid: storefront.category(slug_path, _int(page)))

    @router.get("/product/{offer_id}", response_class=HTMLResponse)
    def product(request: Request, offer_id: str):
        offer = storefront.catalog.get(offer_id)
        if offer is None or offer.shop_id != shop_id:
            return respond(request, lambda sid: None)
        return respond(request, lambda sid: storefront.product(offer))

    @router.get("/search", response_class=HTMLResponse)
    def search(request: Request, q: str = ""):
        return respond(request, lambda sid: storefront.search(q))

    @router.post("/cart/add", response_class=HTMLResponse)
    def cart_add(request: Request, offer_id: str = Form(""), quantity: str = Form("1")):
        return respond(
            request,
            lambda sid: storefront.cart(store.add_to_cart(sid, shop_id, offer_id, _int(quantity))),
            open_session=True,
        )

    @router.get("/cart", response_class=HTMLResponse)
    def cart(request: Request):
        def show(sid: Optional[str]) -> str:
            view = store.view_cart(sid, shop_id) if sid else CartView(session_id="", shop_id=shop_id)
            return storefront.cart(view)

        return respond(request, show)

    @router.post("/checkout", response_class=HTMLResponse)
    def checkout(
        request: Request,
        name: str = Form(""),
        street: str = Form(""),
        city: str = Form(""),
        postal_code: str = Form(""),
        country: str = Form(""),
        card_number: str = Form(""),
    ):
        shipping = {"name": name, "street": street, "city": city, "postal_code": postal_code, "country": country}

        def place(sid: Optional[str]) -> str:
            if sid is None:
                raise EmptyCartError(f"empty cart in {shop_id}")
            return storefront.order(store.checkout(sid, shop_id, shipping, {"card_number": card_number}))

        return respond(request, place)

    @router.get("/order/{order_id}", response_class=HTMLResponse)
    def order(request: Request, order_id: str):
        found = store.get_order(order_id)
        if found is None or found.shop_id != shop_id:
            return respond(request, lambda sid: None)
        return respond(request, lambda sid: storefront.order(found))

    return router


def _int(value: str) -> int:
    try:
        return int(str(value).strip())
    except ValueError:
        return 0


# -- page model -------------------------------------------------------------


class Link(BaseModel):
    text: str
    href: str
    region: str = "main"


class FormField(BaseModel):
    name: str
    type: str = "text"
    value: str = ""


class PageForm(BaseModel):
    action: str
    method: str = "GET"
    fields: List[FormField] = Field(default_factory=list)


class PageModel(BaseModel):
    """Simplified page observation: headings, links, forms and main text."""

    url: str
    title: str = ""
    headings: List[str] = Field(default_factory=list)
    links: List[Link] = Field(default_factory=list)
    forms: List[PageForm] = Field(default_factory=list)
    main_text: str = ""

    @property
    def content_links(self) -> List[Link]:
        return [link for link in self.links if link.region == "main"]

    def digest(self, max_text_chars: int = 1500) -> str:
        """Text rendering of the page given to the decision policy."""
        lines = [f"URL: {self.url}", f"Title: {self.title}"]
        if self.headings:
            lines.append("Headings: " + " | ".join(self.headings))
        text = self.main_text
        if len(text) > max_text_chars:
            text = text[:max_text_chars] + " ..."
        lines.append(f"Text: {text}")
        lines.append("Links:")
        for i, link in enumerate(self.links):
            lines.append(f"  [{i}] {link.text} -> {link.href}")
        lines.append("Forms:")
        for i, form in enumerate(self.forms):
            fields = ", ".join(
                f"{f.name}({f.type}{'=' + f.value if f.value else ''})" for f in form.fields
            )
            lines.append(f"  [{i}] {form.method} {form.action} fields: {fields}")
        return "\n".join(lines)


def _absolute(base_url: str, href: str) -> str:
    url = urljoin(base_url, href)
    try:
        return normalize_url(url)
    except NormalizationError:
        return url


def extract_page_model(html: str, url: str) -> PageModel:
    """
    Parse a storefront page into a PageModel.

    Links inside ``<main>`` get region "main"; all others are "navigation".
    Forms list every named input, select and textarea except submit buttons.
    """
    if not html:
        return PageModel(url=url)
    soup = BeautifulSoup(html, "html.parser")
    title = soup.title.get_text(" ", strip=True) if soup.title else ""
    headings = [h.get_text(" ", strip=True) for h in soup.find_all(["h1", "h2", "h3"])]

    links = []
    for a in soup.find_all("a", href=True):
        region = "main" if a.find_parent("main") is not None else "navigation"
        links.append(Link(text=" ".join(a.get_text(" ").split()), href=_absolute(url, a["href"]), region=region))

    forms = []
    for form in soup.find_all("form"):
        fields = []
        for element in form.find_all(["input", "select", "textarea"]):
            name = element.get("name")
            if not name:
                continue
            if element.name == "input":
                kind = (element.get("type") or "text").lower()
                if kind in ("submit", "button", "reset", "image"):
                    continue
                value = element.get("value") or ""
            else:
                kind = element.name
                value = element.get_text(strip=True) if element.name == "textarea" else ""
            fields.append(FormField(name=name, type=kind, value=value))
        forms.append(
            PageForm(
                action=_absolute(url, form.get("action") or url),
                method=(form.get("method") or "GET").upper(),
                fields=fields,
            )
        )

    main = soup.find("main")
    main_text = clean_html(str(main)) if main is not None else clean_html(html)
    return PageModel(url=url, title=title, headings=headings, links=links, forms=forms, main_text=main_text)
