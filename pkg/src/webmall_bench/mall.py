"""
The mall: one FastAPI application per shop, plus a host-dispatching ASGI app
so all shops can be exercised through a single in-process client.

Each shop application serves:

* the HTML storefront at ``/``
* the MCP server at ``POST /mcp`` and the NLWeb endpoint at ``POST /nlweb``
* a JSON store API under ``/api`` used by the RAG agent's transaction functions
* ``GET /health`` and token-protected state snapshots under ``/admin``
"""

import asyncio
import logging
import socket
import threading
import time
from typing import Any, Dict, List, Optional
from urllib.parse import urlsplit

import uvicorn
from fastapi import FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from webmall_bench.catalog import Catalog, Shop
from webmall_bench.commerce import RUN_HEADER, SessionStore
from webmall_bench.config import admin_token
from webmall_bench.errors import CommerceError, NetworkError, UnknownOfferError, UnknownSessionError
from webmall_bench.jsonrpc import ToolServer, rpc_route
from webmall_bench.search_index import Index, index_docs, offer_docs
from webmall_bench.shop_html import Storefront, html_router
from webmall_bench.shop_mcp import ShopBackend, build_mcp_server
from webmall_bench.shop_nlweb import build_nlweb_server

logger = logging.getLogger(__name__)


class ApiCartRequest(BaseModel):
    session: str
    url: str
    quantity: int = 1


class ApiCheckoutRequest(BaseModel):
    session: str
    shipping: Dict[str, Any] = Field(default_factory=dict)
    payment: Any = None


def build_shop_app(backend: ShopBackend, mcp: ToolServer, nlweb: ToolServer) -> FastAPI:
    shop = backend.shop
    store = backend.store
    app = FastAPI(title=f"{shop.display_name} ({shop.shop_id})", docs_url=None, redoc_url=None, openapi_url=None)

    @app.exception_handler(CommerceError)
    async def commerce_error(request: Request, exc: CommerceError):
        return JSONResponse({"error": str(exc)}, status_code=400)

    app.include_router(html_router(Storefront(shop, backend.catalog), store))
    app.add_api_route("/mcp", rpc_route(mcp, RUN_HEADER), methods=["POST"])
    app.add_api_route("/nlweb", rpc_route(nlweb, RUN_HEADER), methods=["POST"])

    @app.get("/health")
    def health():
        return {"status": "ok", "shop_id": shop.shop_id}

    @app.post("/api/session")
    def api_session(request: Request):
        return {"session": store.create_session(run_tag=request.headers.get(RUN_HEADER))}

    @app.post("/api/cart")
    def api_add(body: ApiCartRequest):
        offer = backend.catalog.lookup_url(body.url)
        if offer is None:
            raise UnknownOfferError(f"unknown product {body.url}")
        return backend.add(body.session, offer.offer_id, body.quantity).model_dump()

    @app.get("/api/cart")
    def api_cart(session: str):
        return backend.view(session).model_dump()

    @app.post("/api/checkout")
    def api_checkout(body: ApiCheckoutRequest):
        order = backend.checkout(body.session, body.shipping, body.payment)
        return order.model_dump(mode="json", exclude={"created_at"})

    def require_admin(token: Optional[str]) -> None:
        if token != admin_token():
            raise HTTPException(status_code=403, detail="invalid admin token")

    @app.get("/admin/session/{session_id}/snapshot")
    def admin_session(session_id: str, x_admin_token: Optional[str] = Header(None)):
        require_admin(x_admin_token)
        try:
            return store.snapshot_state(session_id).model_dump()
        except UnknownSessionError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.get("/admin/run/{run_tag}/snapshot")
    def admin_run(run_tag: str, x_admin_token: Optional[str] = Header(None)):
        require_admin(x_admin_token)
        return store.snapshot_run(run_tag).model_dump()

    @app.delete("/admin/run/{run_tag}")
    def admin_drop_run(run_tag: str, x_admin_token: Optional[str] = Header(None)):
        require_admin(x_admin_token)
        return {"dropped": store.drop_run(run_tag)}

    return app


class Mall:
    """All shops over one catalog and one session store."""

    def __init__(
        self,
        catalog: Catalog,
        store: Optional[SessionStore] = None,
        offer_indexes: Optional[Dict[str, Index]] = None,
    ):
        self.catalog = catalog
        self.store = store or SessionStore(catalog)
        offer_indexes = dict(offer_indexes or {})
        self.backends: Dict[str, ShopBackend] = {}
        self.mcp_servers: Dict[str, ToolServer] = {}
        self.nlweb_servers: Dict[str, ToolServer] = {}
        self.apps: Dict[str, FastAPI] = {}
        self._by_netloc: Dict[str, str] = {}
        for shop in catalog.shops:
            index = offer_indexes.get(shop.shop_id)
            if index is None:
                index = index_docs(offer_docs(catalog, shop.shop_id))
            backend = ShopBackend(shop, catalog, self.store, index)
            self.backends[shop.shop_id] = backend
            self.mcp_servers[shop.shop_id] = build_mcp_server(backend)
            self.nlweb_servers[shop.shop_id] = build_nlweb_server(backend)
            self.apps[shop.shop_id] = build_shop_app(
                backend, self.mcp_servers[shop.shop_id], self.nlweb_servers[shop.shop_id]
            )
            self._by_netloc[shop.netloc] = shop.shop_id

    def shop_for_host(self, host: str) -> Optional[str]:
        host = host.lower()
        shop_id = self._by_netloc.get(host)
        if shop_id is None and host.endswith(":80"):
            shop_id = self._by_netloc.get(host[:-3])
        return shop_id

    async def __call__(self, scope, receive, send):
        if scope["type"] == "lifespan":
            while True:
                message = await receive()
                if message["type"] == "lifespan.startup":
                    await send({"type": "lifespan.startup.complete"})
                elif message["type"] == "lifespan.shutdown":
                    await send({"type": "lifespan.shutdown.complete"})
                    return
        host = ""
        for name, value in scope.get("headers", []):
            if name == b"host":
                host = value.decode("latin-1")
                break
        shop_id = self.shop_for_host(host)
        if shop_id is None:
            response = PlainTextResponse(f"no shop is served at {host!r}", status_code=404)
            await response(scope, receive, send)
            return
        await self.apps[shop_id](scope, receive, send)


def shop_port(shop: Shop) -> int:
    parts = urlsplit(shop.base_url)
    return parts.port or (443 if parts.scheme == "https" else 80)


def check_port_free(host: str, port: int) -> None:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError as e:
            raise NetworkError(f"cannot bind {host}:{port}: {e}") from e


class ServerHandle:
    """Runs one uvicorn server per shop in a background thread."""

    def __init__(self, mall: Mall, host: str = "127.0.0.1", log_level: str = "warning"):
        self.mall = mall
        self.host = host
        self.servers: List[uvicorn.Server] = []
        for shop in mall.catalog.shops:
            config = uvicorn.Config(mall.apps[shop.shop_id], host=host, port=shop_port(shop), log_level=log_level)
            self.servers.append(uvicorn.Server(config))
        self._thread: Optional[threading.Thread] = None

    def start(self, timeout: float = 10.0) -> "ServerHandle":
        for shop in self.mall.catalog.shops:
            check_port_free(self.host, shop_port(shop))

        async def serve_all():
            await asyncio.gather(*(server.serve() for server in self.servers))

        self._thread = threading.Thread(target=lambda: asyncio.run(serve_all()), daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not all(server.started for server in self.servers):
            if time.monotonic() > deadline or not self._thread.is_alive():
                self.stop()
                raise NetworkError("shop servers did not start")
            time.sleep(0.05)
        for shop in self.mall.catalog.shops:
            logger.info(f"{shop.display_name} ({shop.shop_id}) ready at {shop.base_url}")
        return self

    def wait(self) -> None:
        if self._thread is not None:
            self._thread.join()

    def stop(self) -> None:
        for server in self.servers:
            server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None
