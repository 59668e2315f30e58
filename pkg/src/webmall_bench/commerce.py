"""
Sessions, per-shop carts, checkout and orders.

A session holds one cart per shop. All three shop interfaces (HTML, MCP,
NLWeb) and the RAG agent's store API mutate the same :class:`SessionStore`;
the evaluator reads it back through :meth:`SessionStore.snapshot_state` or
:meth:`SessionStore.snapshot_run`.
"""

import logging
import re
import threading
import uuid
from collections import Counter
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from webmall_bench.catalog import Catalog
from webmall_bench.errors import (
    EmptyCartError,
    InvalidQuantityError,
    PaymentError,
    ShippingError,
    ShopMismatchError,
    UnknownOfferError,
    UnknownSessionError,
)

logger = logging.getLogger(__name__)

SHIPPING_FIELDS = ("name", "street", "city", "postal_code", "country")
SHIPPING_ALIASES = {
    "full_name": "name",
    "address": "street",
    "address_line": "street",
    "zip": "postal_code",
    "postcode": "postal_code",
    "zip_code": "postal_code",
}
CARD_KEYS = ("card_number", "number", "card", "card_no", "pan")
CARD_PATTERN = re.compile(r"[0-9]{12,19}")

# request header tagging sessions with the task run that created them
RUN_HEADER = "X-Run-Id"


class LineItem(BaseModel):
    offer_id: str
    quantity: int = Field(ge=1)
    unit_price_cents: int = Field(ge=0)


class CartLine(BaseModel):
    offer_id: str
    title: str
    url: str
    quantity: int
    unit_price_cents: int
    subtotal_cents: int


class CartView(BaseModel):
    session_id: str
    shop_id: str
    lines: List[CartLine] = Field(default_factory=list)
    total_cents: int = 0
    currency: str = "USD"


class Shipping(BaseModel):
    name: str
    street: str
    city: str
    postal_code: str
    country: str


class PaymentRecord(BaseModel):
    """Masked card; only the last four digits are kept."""

    card_last4: str


class Order(BaseModel):
    order_id: str
    session_id: str
    shop_id: str
    items: List[LineItem]
    shipping: Shipping
    payment: PaymentRecord
    total_cents: int
    currency: str = "USD"
    created_at: datetime


class StateSnapshot(BaseModel):
    """
    Read-only copy of transactional state.

    carts: shop_id -> {offer_id: quantity}; shops with empty carts are omitted
    orders: shop_id -> list of {offer_id: quantity}, one entry per order
    """

    carts: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    orders: Dict[str, List[Dict[str, int]]] = Field(default_factory=dict)

    def cart(self, shop_id: str) -> Dict[str, int]:
        return self.carts.get(shop_id, {})

    def orders_for(self, shop_id: str) -> List[Dict[str, int]]:
        return self.orders.get(shop_id, [])


def luhn_valid(number: str) -> bool:
    """True if ``number`` (spaces and dashes allowed) has 12-19 digits and passes the Luhn check."""
    digits = re.sub(r"[\s-]", "", str(number))
    if not CARD_PATTERN.fullmatch(digits):
        return False
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = int(ch)
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def parse_shipping(data: Any) -> Shipping:
    """Accept a Shipping or a mapping (common aliases allowed); every field must be non-empty."""
    if isinstance(data, Shipping):
        data = data.model_dump()
    if not isinstance(data, dict):
        raise ShippingError("shipping details must be an object with " + ", ".join(SHIPPING_FIELDS))
    fields: Dict[str, str] = {}
    for key, value in data.items():
        key = SHIPPING_ALIASES.get(key, key)
        if key in SHIPPING_FIELDS and value is not None:
            fields.setdefault(key, str(value).strip())
    missing = [f for f in SHIPPING_FIELDS if not fields.get(f)]
    if missing:
        raise ShippingError(f"missing shipping field(s): {', '.join(missing)}")
    return Shipping(**fields)


def parse_payment(data: Any) -> PaymentRecord:
    """Validate a card number (string or mapping holding one) and mask it."""
    number = data
    if isinstance(data, dict):
        number = next((data[k] for k in CARD_KEYS if data.get(k)), None)
    if not isinstance(number, (str, int)) or not luhn_valid(str(number)):
        raise PaymentError("invalid card number")
    digits = re.sub(r"[\s-]", "", str(number))
    return PaymentRecord(card_last4=digits[-4:])


class _Session:
    def __init__(self, session_id: str, run_tag: Optional[str]):
        self.session_id = session_id
        self.run_tag = run_tag
        self.lock = threading.Lock()
        # shop_id -> offer_id -> LineItem (insertion ordered)
        self.carts: Dict[str, Dict[str, LineItem]] = {}
        self.orders: List[Order] = []


class SessionStore:
    """
    Thread-safe store of shopping sessions over one catalog.

    The store-level lock only guards the session table; operations on a
    single session are serialized by that session's own lock.
    """

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self._lock = threading.Lock()
        self._sessions: Dict[str, _Session] = {}
        self._orders: Dict[str, Order] = {}
        self._order_numbers: Counter = Counter()

    def create_session(self, run_tag: Optional[str] = None) -> str:
        session_id = uuid.uuid4().hex
        with self._lock:
            self._sessions[session_id] = _Session(session_id, run_tag)
        logger.debug(f"Created session {session_id} (run {run_tag})")
        return session_id

    def has_session(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._sessions

    def _session(self, session_id: str) -> _Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        return session

    def _cart_view(self, session: _Session, shop_id: str) -> CartView:
        lines = []
        currency = "USD"
        for item in session.carts.get(shop_id, {}).values():
            offer = self.catalog.get(item.offer_id)
            currency = offer.currency
            lines.append(
                CartLine(
                    offer_id=item.offer_id,
                    title=offer.title,
                    url=offer.url,
                    quantity=item.quantity,
                    unit_price_cents=item.unit_price_cents,
                    subtotal_cents=item.quantity * item.unit_price_cents,
                )
            )
        return CartView(
            session_id=session.session_id,
            shop_id=shop_id,
            lines=lines,
            total_cents=sum(line.subtotal_cents for line in lines),
            currency=currency,
        )

    def add_to_cart(self, session_id: str, shop_id: str, offer_id: str, quantity: int = 1) -> CartView:
        """
        Add ``quantity`` of an offer to the session's cart in ``shop_id``.

        Adding an offer already in the cart merges the quantities.

        :raises UnknownSessionError, UnknownOfferError, ShopMismatchError, InvalidQuantityError:
        """
        session = self._session(session_id)
        offer = self.catalog.get(offer_id)
        if offer is None:
            raise UnknownOfferError(f"unknown product {offer_id!r}")
        if offer.shop_id != shop_id:
            raise ShopMismatchError(f"product {offer_id!r} is sold by {offer.shop_id}, not {shop_id}")
        if isinstance(quantity, bool) or not isinstance(quantity, int) or quantity < 1:
            raise InvalidQuantityError(f"quantity must be a positive integer, got {quantity!r}")

        with session.lock:
            cart = session.carts.setdefault(shop_id, {})
            existing = cart.get(offer_id)
            if existing is None:
                cart[offer_id] = LineItem(offer_id=offer_id, quantity=quantity, unit_price_cents=offer.price_cents)
            else:
                cart[offer_id] = existing.model_copy(update={"quantity": existing.quantity + quantity})
            return self._cart_view(session, shop_id)

    def view_cart(self, session_id: str, shop_id: str) -> CartView:
        session = self._session(session_id)
        with session.lock:
            return self._cart_view(session, shop_id)

    def checkout(self, session_id: str, shop_id: str, shipping: Any, payment: Any) -> Order:
        """
        Turn the session's cart in ``shop_id`` into an order and empty that cart.

        Carts in other shops are left untouched.

        :raises EmptyCartError, ShippingError, PaymentError, UnknownSessionError:
        """
        session = self._session(session_id)
        with session.lock:
            items = list(session.carts.get(shop_id, {}).values())
            if not items:
                raise EmptyCartError(f"empty cart in {shop_id}")
            ship_to = parse_shipping(shipping)
            card = parse_payment(payment)
            view = self._cart_view(session, shop_id)
            order = Order(
                order_id=self._next_order_id(shop_id),
                session_id=session_id,
                shop_id=shop_id,
                items=items,
                shipping=ship_to,
                payment=card,
                total_cents=sum(i.quantity * i.unit_price_cents for i in items),
                currency=view.currency,
                created_at=datetime.now(timezone.utc),
            )
            session.orders.append(order)
            session.carts[shop_id] = {}
        with self._lock:
            self._orders[order.order_id] = order
        logger.info(f"Order {order.order_id} placed in {shop_id}: {len(items)} line(s), {order.total_cents} cents")
        return order

    def _next_order_id(self, shop_id: str) -> str:
        with self._lock:
            self._order_numbers[shop_id] += 1
            return f"ORD-{shop_id}-{self._order_numbers[shop_id]:05d}"

    def get_order(self, order_id: str) -> Optional[Order]:
        with self._lock:
            return self._orders.get(order_id)

    @staticmethod
    def _fill_snapshot(session: _Session, carts: Dict[str, Counter], orders: Dict[str, List[Dict[str, int]]]):
        for shop_id, cart in session.carts.items():
            for item in cart.values():
                carts.setdefault(shop_id, Counter())[item.offer_id] += item.quantity
        for order in session.orders:
            orders.setdefault(order.shop_id, []).append({i.offer_id: i.quantity for i in order.items})

    @staticmethod
    def _freeze(carts: Dict[str, Counter], orders: Dict[str, List[Dict[str, int]]]) -> StateSnapshot:
        return StateSnapshot(
            carts={shop: dict(sorted(c.items())) for shop, c in sorted(carts.items()) if c},
            orders={shop: o for shop, o in sorted(orders.items())},
        )

    def snapshot_state(self, session_id: str) -> StateSnapshot:
        session = self._session(session_id)
        carts: Dict[str, Counter] = {}
        orders: Dict[str, List[Dict[str, int]]] = {}
        with session.lock:
            self._fill_snapshot(session, carts, orders)
        return self._freeze(carts, orders)

    def sessions_for_run(self, run_tag: str) -> List[str]:
        with self._lock:
            return [s.session_id for s in self._sessions.values() if s.run_tag == run_tag]

    def snapshot_run(self, run_tag: str) -> StateSnapshot:
        """Merged snapshot of every session created under ``run_tag`` (empty if there are none)."""
        carts: Dict[str, Counter] = {}
        orders: Dict[str, List[Dict[str, int]]] = {}
        for session_id in self.sessions_for_run(run_tag):
            session = self._session(session_id)
            with session.lock:
                self._fill_snapshot(session, carts, orders)
        return self._freeze(carts, orders)

    def drop_run(self, run_tag: str) -> int:
        """
        Forget every session created under ``run_tag`` and the orders placed in them.

        :return: number of sessions removed
        """
        with self._lock:
            dropped = [s for s in self._sessions.values() if s.run_tag == run_tag]
            for session in dropped:
                del self._sessions[session.session_id]
                for order in session.orders:
                    self._orders.pop(order.order_id, None)
        logger.debug(f"Dropped {len(dropped)} session(s) of run {run_tag}")
        return len(dropped)

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)
