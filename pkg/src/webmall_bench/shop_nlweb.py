"""
NLWeb endpoints: a natural-language ``ask`` tool plus uniform cart tools.

Unlike the per-shop MCP servers, every shop exposes exactly the same tool
list, and every result uses the schema.org vocabulary. Products are added to a
cart by their URL.
"""

import logging
from typing import Any, Dict, List

from webmall_bench.catalog import Offer
from webmall_bench.commerce import CartView, Order
from webmall_bench.errors import UnknownOfferError
from webmall_bench.jsonrpc import INVALID_PARAMS, CallContext, JsonRpcError, ToolDescriptor, ToolParam, ToolServer
from webmall_bench.shop_mcp import DEFAULT_LIMIT, ShopBackend, cents_to_decimal

logger = logging.getLogger(__name__)

SCHEMA_CONTEXT = "https://schema.org"

NLWEB_TOOLS = [
    ToolDescriptor(
        name="ask",
        description="Ask the shop a natural-language question about its products. "
                    "Returns schema.org Product records.",
        params=[
            ToolParam(name="query", type="string", description="natural-language query"),
            ToolParam(name="limit", type="integer", description="maximum number of products", required=False),
        ],
    ),
    ToolDescriptor(name="create_session", description="Start a shopping session; returns a session id."),
    ToolDescriptor(
        name="add_to_cart",
        description="Add the product at the given URL to the session's cart.",
        params=[
            ToolParam(name="session", type="string"),
            ToolParam(name="url", type="string", description="product page URL"),
            ToolParam(name="quantity", type="integer", required=False),
        ],
    ),
    ToolDescriptor(
        name="view_cart",
        description="Show the session's cart.",
        params=[ToolParam(name="session", type="string")],
    ),
    ToolDescriptor(
        name="checkout",
        description="Place the order. shipping: {name, street, city, postal_code, country}; "
                    "payment: {card_number}.",
        params=[
            ToolParam(name="session", type="string"),
            ToolParam(name="shipping", type="object"),
            ToolParam(name="payment", type="object"),
        ],
    ),
]


def schema_org_item(offer: Offer) -> Dict[str, Any]:
    return {
        "@type": "Product",
        "sku": offer.offer_id,
        "name": offer.title,
        "description": offer.description,
        "url": offer.url,
        "offers": {
            "@type": "Offer",
            "price": offer.price_decimal,
            "priceCurrency": offer.currency,
        },
    }


def _price(cents: int, currency: str) -> Dict[str, Any]:
    return {"@type": "PriceSpecification", "price": cents_to_decimal(cents), "priceCurrency": currency}


class NlwebHandlers:
    def __init__(self, backend: ShopBackend):
        self.backend = backend

    def ask(self, args: Dict[str, Any], context: CallContext):
        limit = args.get("limit")
        limit = DEFAULT_LIMIT if limit is None else limit
        if limit < 0:
            return JsonRpcError(code=INVALID_PARAMS, message="limit must be >= 0")
        return [schema_org_item(o) for o in self.backend.search(args["query"], limit)]

    def create_session(self, args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        return {"session": self.backend.create_session(context)}

    def _cart(self, view: CartView) -> Dict[str, Any]:
        return {
            "session": view.session_id,
            "items": [
                {
                    "@type": "OrderItem",
                    "orderQuantity": line.quantity,
                    "orderedItem": {"@type": "Product", "sku": line.offer_id, "name": line.title, "url": line.url},
                    "price": _price(line.unit_price_cents, view.currency),
                }
                for line in view.lines
            ],
            "total": _price(view.total_cents, view.currency),
        }

    def add_to_cart(self, args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        offer = self.backend.catalog.lookup_url(args["url"])
        if offer is None:
            raise UnknownOfferError(f"unknown product {args['url']}")
        quantity = args.get("quantity")
        view = self.backend.add(args["session"], offer.offer_id, 1 if quantity is None else quantity)
        return self._cart(view)

    def view_cart(self, args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        return self._cart(self.backend.view(args["session"]))

    def checkout(self, args: Dict[str, Any], context: CallContext) -> Dict[str, Any]:
        order = self.backend.checkout(args["session"], args["shipping"], args["payment"])
        return self._order(order)

    def _order(self, order: Order) -> Dict[str, Any]:
        items = []
        for item in order.items:
            offer = self.backend.catalog.get(item.offer_id)
            items.append({
                "@type": "OrderItem",
                "orderQuantity": item.quantity,
                "orderedItem": {"@type": "Product", "sku": offer.offer_id, "name": offer.title, "url": offer.url},
            })
        return {
            "@context": SCHEMA_CONTEXT,
            "@type": "Order",
            "orderNumber": order.order_id,
            "orderStatus": "OrderProcessing",
            "orderedItem": items,
            "totalPaymentDue": _price(order.total_cents, order.currency),
        }


def build_nlweb_server(backend: ShopBackend) -> ToolServer:
    server = ToolServer(name=f"{backend.shop_id}-nlweb")
    handlers = NlwebHandlers(backend)
    for descriptor in NLWEB_TOOLS:
        server.tool(descriptor, getattr(handlers, descriptor.name))
    return server


def ask(server: ToolServer, query: str, limit: int) -> List[Dict[str, Any]]:
    """Call the ask tool in-process and return the schema.org items."""
    outcome = server.call_tool("ask", {"query": query, "limit": limit})
    if isinstance(outcome, JsonRpcError):
        raise ValueError(outcome.message)
    return outcome.content
