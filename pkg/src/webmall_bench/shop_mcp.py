"""
Per-shop MCP tool servers.

Each shop publishes its own five tools with its own names, parameter names and
result shapes, the way independently built shop APIs would:

========  ================  ============  =============  ============  ===============
shop      search            detail        session        add           checkout
========  ================  ============  =============  ============  ===============
shop1     search_products   get_product   create_session add_item      checkout
shop2     find_offers       offer_details new_cart       put_in_cart   purchase
shop3     product_search    lookup        open_session   cart_add      finalize
shop4     query_catalog     describe      begin          add           complete_order
========  ================  ============  =============  ============  ===============

Prices: shop1 decimal dollars (``price_usd``), shop2 integer cents
(``cost_cents``), shop3 decimal string (``price``), shop4 an
``{amount, currency}`` object.
"""

import logging
from typing import Any, Callable, Dict, List, Optional

from webmall_bench.catalog import Catalog, Offer, Shop
from webmall_bench.commerce import CartView, Order, SessionStore
from webmall_bench.errors import UnknownOfferError
from webmall_bench.jsonrpc import (
    INVALID_PARAMS,
    CallContext,
    JsonRpcError,
    ToolDescriptor,
    ToolParam,
    ToolServer,
)
from webmall_bench.search_index import Index

logger = logging.getLogger(__name__)

DEFAULT_LIMIT = 10


def cents_to_decimal(cents: int) -> str:
    return f"{cents // 100}.{cents % 100:02d}"


class ShopBackend:
    """Search and commerce operations of one shop, shared by its MCP and NLWeb servers."""

    def __init__(self, shop: Shop, catalog: Catalog, store: SessionStore, index: Index):
        self.shop = shop
        self.catalog = catalog
        self.store = store
        self.index = index

    @property
    def shop_id(self) -> str:
        return self.shop.shop_id

    def search(self, query: str, limit: int) -> List[Offer]:
        """Embedding search restricted to this shop; at most ``limit`` offers."""
        hits = self.index.search(query, limit, shop_filter=self.shop_id)
        return [self.catalog.get(h.doc.offer_id) for h in hits if h.doc.offer_id]

    def offer(self, offer_id: str) -> Offer:
        offer = self.catalog.get(offer_id)
        if offer is None or offer.shop_id != self.shop_id:
            raise UnknownOfferError(f"unknown product {offer_id!r}")
        return offer

    def create_session(self, context: CallContext) -> str:
        return self.store.create_session(run_tag=context.run_tag)

    def add(self, session_id: str, offer_id: str, quantity: int) -> CartView:
        return self.store.add_to_cart(session_id, self.shop_id, offer_id, quantity)

    def view(self, session_id: str) -> CartView:
        return self.store.view_cart(session_id, self.shop_id)

    def checkout(self, session_id: str, shipping: Any, payment: Any) -> Order:
        return self.store.checkout(session_id, self.shop_id, shipping, payment)


def _limit(value: Optional[int]) -> Any:
    if value is None:
        return DEFAULT_LIMIT
    if value < 0:
        return JsonRpcError(code=INVALID_PARAMS, message="limit must be >= 0")
    return value


def _searcher(backend: ShopBackend, query_key: str, limit_key: str, wrap: str, shape: Callable[[Offer], Dict]):
    def handler(args: Dict[str, Any], context: CallContext):
        limit = _limit(args.get(limit_key))
        if isinstance(limit, JsonRpcError):
            return limit
        return {wrap: [shape(o) for o in backend.search(args[query_key], limit)]}

    return handler


def _qty(args: Dict[str, Any], key: str) -> int:
    value = args.get(key)
    return 1 if value is None else value


def _p(name: str, type_: str = "string", description: str = "", required: bool = True) -> ToolParam:
    return ToolParam(name=name, type=type_, description=description, required=required)


def _shop1(server: ToolServer, backend: ShopBackend) -> None:
    def item(o: Offer) -> Dict[str, Any]:
        return {"product_id": o.offer_id, "name": o.title, "price_usd": round(o.price_float, 2), "url": o.url}

    def details(args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        o = backend.offer(args["product_id"])
        return {**item(o), "description": o.description, "category": list(o.category_path), "attributes": o.attributes}

    def cart(view: CartView) -> Dict[str, Any]:
        return {
            "session": view.session_id,
            "items": [
                {"product_id": l.offer_id, "name": l.title, "qty": l.quantity, "price_usd": l.unit_price_cents / 100}
                for l in view.lines
            ],
            "total_usd": view.total_cents / 100,
        }

    server.tool(
        ToolDescriptor(
            name="search_products",
            description="Search the E-Store Athletes catalog. Prices are in US dollars.",
            params=[_p("query", description="search text"),
                    _p("max_results", "integer", "maximum number of items", required=False)],
        ),
        _searcher(backend, "query", "max_results", "items", item),
    )
    server.tool(
        ToolDescriptor(name="get_product", description="Full details of one product.", params=[_p("product_id")]),
        details,
    )
    server.tool(
        ToolDescriptor(name="create_session", description="Start a shopping session; returns a session id."),
        lambda a, c: {"session": backend.create_session(c)},
    )
    server.tool(
        ToolDescriptor(
            name="add_item",
            description="Add a product to the cart of a session.",
            params=[_p("session"), _p("product_id"), _p("qty", "integer", "quantity", required=False)],
        ),
        lambda a, c: cart(backend.add(a["session"], a["product_id"], _qty(a, "qty"))),
    )
    server.tool(
        ToolDescriptor(
            name="checkout",
            description="Place the order. shipping: {name, street, city, postal_code, country}; card: card number.",
            params=[_p("session"), _p("shipping", "object"), _p("card")],
        ),
        lambda a, c: _order1(backend.checkout(a["session"], a["shipping"], a["card"])),
    )


def _order1(order: Order) -> Dict[str, Any]:
    return {
        "order_id": order.order_id,
        "items": [{"product_id": i.offer_id, "qty": i.quantity} for i in order.items],
        "total_usd": order.total_cents / 100,
    }


def _shop2(server: ToolServer, backend: ShopBackend) -> None:
    def result(o: Offer) -> Dict[str, Any]:
        return {"id": o.offer_id, "title": o.title, "cost_cents": o.price_cents, "currency": o.currency, "link": o.url}

    def cart(view: CartView) -> Dict[str, Any]:
        return {
            "cart": view.session_id,
            "entries": [
                {"id": l.offer_id, "title": l.title, "count": l.quantity, "cost_cents": l.unit_price_cents}
                for l in view.lines
            ],
            "total_cents": view.total_cents,
            "currency": view.currency,
        }

    def details(args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        o = backend.offer(args["id"])
        return {**result(o), "text": o.description, "categories": list(o.category_path), "specs": o.attributes}

    server.tool(
        ToolDescriptor(
            name="find_offers",
            description="Find offers at TechTalk. Costs are integer cents.",
            params=[_p("q", description="query"), _p("top_k", "integer", "number of results", required=False)],
        ),
        _searcher(backend, "q", "top_k", "results", result),
    )
    server.tool(ToolDescriptor(name="offer_details", description="Details of an offer.", params=[_p("id")]), details)
    server.tool(
        ToolDescriptor(name="new_cart", description="Create a cart; returns its cart id."),
        lambda a, c: {"cart": backend.create_session(c)},
    )
    server.tool(
        ToolDescriptor(
            name="put_in_cart",
            description="Put an offer in a cart.",
            params=[_p("cart"), _p("id"), _p("count", "integer", required=False)],
        ),
        lambda a, c: cart(backend.add(a["cart"], a["id"], _qty(a, "count"))),
    )
    server.tool(
        ToolDescriptor(
            name="purchase",
            description="Buy the cart. ship_to: {name, street, city, postal_code, country}; payment: {card_number}.",
            params=[_p("cart"), _p("ship_to", "object"), _p("payment", "object")],
        ),
        lambda a, c: _order2(backend.checkout(a["cart"], a["ship_to"], a["payment"])),
    )


def _order2(order: Order) -> Dict[str, Any]:
    return {
        "order_ref": order.order_id,
        "entries": [{"id": i.offer_id, "count": i.quantity} for i in order.items],
        "total_cents": order.total_cents,
        "currency": order.currency,
    }


def _shop3(server: ToolServer, backend: ShopBackend) -> None:
    def hit(o: Offer) -> Dict[str, Any]:
        return {"sku": o.offer_id, "label": o.title, "price": o.price_decimal, "page": o.url}

    def cart(view: CartView) -> Dict[str, Any]:
        return {
            "sid": view.session_id,
            "lines": [
                {"sku": l.offer_id, "label": l.title, "n": l.quantity, "price": cents_to_decimal(l.unit_price_cents)}
                for l in view.lines
            ],
            "total": cents_to_decimal(view.total_cents),
        }

    def lookup(args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        o = backend.offer(args["sku"])
        return {**hit(o), "about": o.description, "path": " / ".join(o.category_path), "properties": o.attributes}

    server.tool(
        ToolDescriptor(
            name="product_search",
            description="CamelCases product search. Prices are decimal strings.",
            params=[_p("text"), _p("limit", "integer", required=False)],
        ),
        _searcher(backend, "text", "limit", "hits", hit),
    )
    server.tool(ToolDescriptor(name="lookup", description="Look up one SKU.", params=[_p("sku")]), lookup)
    server.tool(
        ToolDescriptor(name="open_session", description="Open a session; returns sid."),
        lambda a, c: {"sid": backend.create_session(c)},
    )
    server.tool(
        ToolDescriptor(
            name="cart_add",
            description="Add n units of a SKU to the session cart.",
            params=[_p("sid"), _p("sku"), _p("n", "integer", required=False)],
        ),
        lambda a, c: cart(backend.add(a["sid"], a["sku"], _qty(a, "n"))),
    )
    server.tool(
        ToolDescriptor(
            name="finalize",
            description="Finalize the order. address: {name, street, city, postal_code, country}; card_no: card number.",
            params=[_p("sid"), _p("address", "object"), _p("card_no")],
        ),
        lambda a, c: _order3(backend.checkout(a["sid"], a["address"], a["card_no"])),
    )


def _order3(order: Order) -> Dict[str, Any]:
    return {
        "confirmation": order.order_id,
        "status": "complete",
        "lines": [{"sku": i.offer_id, "n": i.quantity} for i in order.items],
        "total": cents_to_decimal(order.total_cents),
    }


def _money(cents: int, currency: str) -> Dict[str, Any]:
    return {"amount": cents_to_decimal(cents), "currency": currency}


def _shop4(server: ToolServer, backend: ShopBackend) -> None:
    def match(o: Offer) -> Dict[str, Any]:
        return {"ref": o.offer_id, "title": o.title, "price": _money(o.price_cents, o.currency), "href": o.url}

    def basket(view: CartView) -> Dict[str, Any]:
        return {
            "token": view.session_id,
            "basket": [
                {"ref": l.offer_id, "title": l.title, "qty": l.quantity,
                 "price": _money(l.unit_price_cents, view.currency)}
                for l in view.lines
            ],
            "total": _money(view.total_cents, view.currency),
        }

    def describe(args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        o = backend.offer(args["ref"])
        return {**match(o), "summary": o.description, "taxonomy": list(o.category_path), "facts": o.attributes}

    server.tool(
        ToolDescriptor(
            name="query_catalog",
            description="Query the Hardware Cafe catalog. Prices are {amount, currency} objects.",
            params=[_p("keywords"), _p("n", "integer", required=False)],
        ),
        _searcher(backend, "keywords", "n", "matches", match),
    )
    server.tool(ToolDescriptor(name="describe", description="Describe one product.", params=[_p("ref")]), describe)
    server.tool(
        ToolDescriptor(name="begin", description="Begin a shopping session; returns a token."),
        lambda a, c: {"token": backend.create_session(c)},
    )
    server.tool(
        ToolDescriptor(
            name="add",
            description="Add a product to the basket identified by token.",
            params=[_p("ref"), _p("qty", "integer", required=False), _p("token")],
        ),
        lambda a, c: basket(backend.add(a["token"], a["ref"], _qty(a, "qty"))),
    )
    server.tool(
        ToolDescriptor(
            name="complete_order",
            description="Complete the order. delivery: {name, street, city, postal_code, country}; pay: {card_number}.",
            params=[_p("token"), _p("delivery", "object"), _p("pay", "object")],
        ),
        lambda a, c: _order4(backend.checkout(a["token"], a["delivery"], a["pay"])),
    )


def _order4(order: Order) -> Dict[str, Any]:
    return {
        "order": {
            "id": order.order_id,
            "items": [{"ref": i.offer_id, "qty": i.quantity} for i in order.items],
            "total": _money(order.total_cents, order.currency),
        }
    }


SHOP_BUILDERS = {"shop1": _shop1, "shop2": _shop2, "shop3": _shop3, "shop4": _shop4}

# search tool name, query param, limit param, result list key, id field, url field
SEARCH_SCHEMAS = {
    "shop1": ("search_products", "query", "max_results", "items", "product_id", "url"),
    "shop2": ("find_offers", "q", "top_k", "results", "id", "link"),
    "shop3": ("product_search", "text", "limit", "hits", "sku", "page"),
    "shop4": ("query_catalog", "keywords", "n", "matches", "ref", "href"),
}


def build_mcp_server(backend: ShopBackend) -> ToolServer:
    """
    The MCP server of one shop.

    Shops outside the standard four reuse the shop1 schema.
    """
    server = ToolServer(name=f"{backend.shop_id}-mcp")
    builder = SHOP_BUILDERS.get(backend.shop_id, _shop1)
    builder(server, backend)
    return server


def list_tools(server: ToolServer) -> List[ToolDescriptor]:
    return server.list_tools()
