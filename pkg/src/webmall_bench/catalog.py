"""
Product catalog shared by the four shops.

The catalog is loaded from a line-delimited JSON file with schema.org-style
field names (``name``, ``price``, ``priceCurrency``, ...). Every offer gets a
canonical URL ``{base_url}/product/{offer_id}`` unless the record carries one.
"""

import json
import logging
import re
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
from urllib.parse import quote, urlsplit, urlunsplit

from pydantic import BaseModel, ConfigDict, Field

from webmall_bench.config import DEFAULT_PORTS_BASE
from webmall_bench.errors import CatalogError, ConfigError, NormalizationError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

SHOP_IDS = ("shop1", "shop2", "shop3", "shop4")
SHOP_NAMES = {
    "shop1": "E-Store Athletes",
    "shop2": "TechTalk",
    "shop3": "CamelCases",
    "shop4": "Hardware Cafe",
}

DEFAULT_PORTS = {"http": 80, "https": 443}
UNRESERVED = re.compile(r"[A-Za-z0-9\-._~]")
PERCENT_ESCAPE = re.compile(r"%([0-9A-Fa-f]{2})")


class Shop(BaseModel):
    model_config = ConfigDict(frozen=True)

    shop_id: str
    display_name: str
    base_url: str

    @property
    def url_prefix(self) -> str:
        """Normalized base URL with exactly one trailing slash."""
        return normalize_url(self.base_url).rstrip("/") + "/"

    @property
    def netloc(self) -> str:
        return urlsplit(normalize_url(self.base_url)).netloc


class Offer(BaseModel):
    """One product offer in one shop."""

    model_config = ConfigDict(frozen=True)

    offer_id: str
    shop_id: str
    title: str
    description: str = ""
    category_path: Tuple[str, ...] = ()
    price_cents: int = Field(ge=0)
    currency: str = Field(min_length=1)
    url: str
    attributes: Dict[str, str] = Field(default_factory=dict)
    extra: Dict[str, Any] = Field(default_factory=dict)

    @property
    def price_decimal(self) -> str:
        """Price as a decimal string with two places, e.g. ``"199.00"``."""
        return f"{self.price_cents // 100}.{self.price_cents % 100:02d}"

    @property
    def price_float(self) -> float:
        return self.price_cents / 100


class CatalogStats(BaseModel):
    offers_per_shop: Dict[str, int]
    total_offers: int
    median_title_length: int
    median_description_length: int


def _fix_escape(match: "re.Match[str]") -> str:
    char = chr(int(match.group(1), 16))
    if UNRESERVED.fullmatch(char):
        return char
    return "%" + match.group(1).upper()


def normalize_url(url: str) -> str:
    """
    Canonicalize a URL.

    Lowercases scheme and host, drops default ports, fragments and trailing
    slashes on non-root paths, and percent-decodes unreserved characters.
    The function is idempotent.

    :param url: absolute URL
    :return: canonical URL string
    :raises NormalizationError: if the input cannot be parsed as an absolute URL
    """
    if not isinstance(url, str):
        raise NormalizationError(f"not a URL: {url!r}")
    try:
        parts = urlsplit(url.strip())
        port = parts.port
    except ValueError as e:
        raise NormalizationError(f"cannot parse URL {url!r}: {e}") from e
    if not parts.scheme or not parts.hostname:
        raise NormalizationError(f"not an absolute URL: {url!r}")

    scheme = parts.scheme.lower()
    host = parts.hostname.lower()
    if ":" in host:
        host = f"[{host}]"
    if port is not None and DEFAULT_PORTS.get(scheme) != port:
        host = f"{host}:{port}"
    if parts.username is not None:
        userinfo = parts.username
        if parts.password is not None:
            userinfo += f":{parts.password}"
        host = f"{userinfo}@{host}"

    path = PERCENT_ESCAPE.sub(_fix_escape, parts.path)
    query = PERCENT_ESCAPE.sub(_fix_escape, parts.query)
    if path != "/":
        path = path.rstrip("/")
    if not path:
        path = "/"
    return urlunsplit((scheme, host, path, query, ""))


def find_shop(shops: List[Shop], url: str) -> Optional[Shop]:
    """The shop among ``shops`` whose base URL contains ``url``, if any."""
    try:
        canonical = normalize_url(url)
    except NormalizationError:
        return None
    for shop in shops:
        if canonical.startswith(shop.url_prefix) or canonical + "/" == shop.url_prefix:
            return shop
    return None


def product_url(shop: Shop, offer_id: str) -> str:
    return f"{shop.base_url.rstrip('/')}/product/{quote(offer_id, safe='-._~')}"


def default_shops(ports_base: int = DEFAULT_PORTS_BASE, host: str = "localhost") -> List[Shop]:
    """The standard four shops, shop i served on ``ports_base + i``."""
    return [
        Shop(
            shop_id=shop_id,
            display_name=SHOP_NAMES[shop_id],
            base_url=f"http://{host}:{ports_base + i}",
        )
        for i, shop_id in enumerate(SHOP_IDS, start=1)
    ]


def load_shops(path: Union[str, Path]) -> List[Shop]:
    """Load shop definitions from a JSON list of {shop_id, display_name, base_url}."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
        return [Shop.model_validate(r) for r in records]
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load shops from {path}: {e}") from e


class Catalog:
    """Immutable collection of offers partitioned into shops."""

    def __init__(self, shops: List[Shop], offers: List[Offer]):
        self.shops: Tuple[Shop, ...] = tuple(shops)
        self.offers: Tuple[Offer, ...] = tuple(offers)
        self._shops_by_id = {s.shop_id: s for s in self.shops}
        self._by_id: Dict[str, Offer] = {}
        self._by_url: Dict[str, Offer] = {}
        self._validate()

    def _validate(self) -> None:
        if len(self._shops_by_id) != len(self.shops):
            raise CatalogError("duplicate shop_id in shop definitions")
        prefixes = [(s.shop_id, s.url_prefix) for s in self.shops]
        for i, (id_a, a) in enumerate(prefixes):
            for id_b, b in prefixes[i + 1:]:
                if a.startswith(b) or b.startswith(a):
                    raise CatalogError(f"base URLs of {id_a} and {id_b} overlap")
        for offer in self.offers:
            self._add(offer)

    def _add(self, offer: Offer, line_number: Optional[int] = None) -> None:
        if offer.offer_id in self._by_id:
            raise CatalogError(f"duplicate offer_id {offer.offer_id!r}", line_number)
        shop = self._shops_by_id.get(offer.shop_id)
        if shop is None:
            raise CatalogError(
                f"offer {offer.offer_id!r} references unknown shop_id {offer.shop_id!r}", line_number
            )
        try:
            canonical = normalize_url(offer.url)
        except NormalizationError as e:
            raise CatalogError(str(e), line_number) from e
        if not canonical.startswith(shop.url_prefix):
            raise CatalogError(
                f"url {offer.url!r} of offer {offer.offer_id!r} is not under {shop.base_url}", line_number
            )
        if canonical in self._by_url:
            raise CatalogError(
                f"url {offer.url!r} of offer {offer.offer_id!r} already used by "
                f"{self._by_url[canonical].offer_id!r}",
                line_number,
            )
        self._by_id[offer.offer_id] = offer
        self._by_url[canonical] = offer

    def __len__(self) -> int:
        return len(self.offers)

    @property
    def shop_ids(self) -> List[str]:
        return [s.shop_id for s in self.shops]

    def shop(self, shop_id: str) -> Shop:
        return self._shops_by_id[shop_id]

    def has_shop(self, shop_id: str) -> bool:
        return shop_id in self._shops_by_id

    def get(self, offer_id: str) -> Optional[Offer]:
        return self._by_id.get(offer_id)

    def lookup_url(self, url: str) -> Optional[Offer]:
        try:
            return self._by_url.get(normalize_url(url))
        except NormalizationError:
            return None

    def shop_for_url(self, url: str) -> Optional[Shop]:
        """The shop whose base URL contains ``url``, if any."""
        return find_shop(self.shops, url)

    def offers_for_shop(self, shop_id: str) -> List[Offer]:
        return [o for o in self.offers if o.shop_id == shop_id]

    def categories(self, shop_id: str) -> List[Tuple[str, ...]]:
        """Distinct category prefixes used by a shop's offers, sorted."""
        found = set()
        for offer in self.offers_for_shop(shop_id):
            for depth in range(1, len(offer.category_path) + 1):
                found.add(offer.category_path[:depth])
        return sorted(found)


def offer_by_url(catalog: Catalog, url: str) -> Optional[Offer]:
    """Return the offer whose canonical URL equals ``normalize_url(url)``, else None."""
    return catalog.lookup_url(url)


def _price_to_cents(value: Any, line_number: int) -> int:
    try:
        amount = Decimal(str(value))
    except InvalidOperation as e:
        raise CatalogError(f"invalid price {value!r}", line_number) from e
    if not amount.is_finite() or amount < 0:
        raise CatalogError(f"invalid price {value!r}", line_number)
    return int((amount * 100).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


KNOWN_FIELDS = {
    "offer_id", "shop_id", "name", "description", "category",
    "price", "priceCurrency", "url", "attributes",
}


def parse_offer_record(record: Dict[str, Any], shops: Dict[str, Shop], line_number: int) -> Offer:
    """Convert one catalog record into an Offer (shop existence is checked by Catalog)."""
    for field in ("offer_id", "shop_id", "name", "price", "priceCurrency"):
        if record.get(field) in (None, ""):
            raise CatalogError(f"missing required field {field!r}", line_number)
    shop_id = str(record["shop_id"])
    offer_id = str(record["offer_id"])
    category = record.get("category") or []
    if isinstance(category, str):
        category = [category]
    url = record.get("url")
    if not url:
        shop = shops.get(shop_id)
        if shop is None:
            raise CatalogError(f"offer {offer_id!r} references unknown shop_id {shop_id!r}", line_number)
        url = product_url(shop, offer_id)
    attributes = record.get("attributes") or {}
    if not isinstance(attributes, dict):
        raise CatalogError("attributes must be an object", line_number)
    try:
        return Offer(
            offer_id=offer_id,
            shop_id=shop_id,
            title=str(record["name"]),
            description=str(record.get("description") or ""),
            category_path=tuple(str(c) for c in category),
            price_cents=_price_to_cents(record["price"], line_number),
            currency=str(record["priceCurrency"]),
            url=str(url),
            attributes={str(k): str(v) for k, v in attributes.items()},
            extra={k: v for k, v in record.items() if k not in KNOWN_FIELDS},
        )
    except ValueError as e:
        if isinstance(e, CatalogError):
            raise
        raise CatalogError(f"invalid offer record: {e}", line_number) from e


def load_catalog(path: Union[str, Path], shops: Optional[List[Shop]] = None) -> Catalog:
    """
    Load and validate a catalog file.

    Args:
        path: line-delimited JSON catalog file
        shops: shop definitions; defaults to the standard four shops

    Returns:
        A fully validated Catalog; record order is preserved.

    Raises:
        CatalogError: on the first malformed or invalid record.
    """
    shops = shops if shops is not None else default_shops()
    shops_by_id = {s.shop_id: s for s in shops}
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"catalog file not found: {path}")

    catalog = Catalog(shops, [])
    offers: List[Offer] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CatalogError(f"malformed record: {e.msg}", line_number) from e
            if not isinstance(record, dict):
                raise CatalogError("record is not a JSON object", line_number)
            offer = parse_offer_record(record, shops_by_id, line_number)
            catalog._add(offer, line_number)
            offers.append(offer)

    catalog.offers = tuple(offers)
    logger.info(f"Loaded {len(offers)} offers across {len(shops)} shops from {path}")
    return catalog


def _lower_median(values: List[int]) -> int:
    if not values:
        return 0
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def catalog_stats(catalog: Catalog) -> CatalogStats:
    """Offer counts per shop and lower-median title/description lengths in characters."""
    counts = {shop_id: 0 for shop_id in catalog.shop_ids}
    for offer in catalog.offers:
        counts[offer.shop_id] += 1
    return CatalogStats(
        offers_per_shop=counts,
        total_offers=len(catalog.offers),
        median_title_length=_lower_median([len(o.title) for o in catalog.offers]),
        median_description_length=_lower_median([len(o.description) for o in catalog.offers]),
    )


def demo_catalog_path() -> Path:
    return DATA_DIR / "demo_catalog.jsonl"


def demo_tasks_path() -> Path:
    return DATA_DIR / "demo_tasks.jsonl"


def demo_manifest() -> Dict[str, Any]:
    with open(DATA_DIR / "demo_manifest.json", "r", encoding="utf-8") as f:
        return json.load(f)
