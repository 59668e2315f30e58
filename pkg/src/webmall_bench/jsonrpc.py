"""
Minimal MCP-style JSON-RPC 2.0 server and client over HTTP POST.

Only the subset the shops need is implemented: ``initialize``,
``notifications/initialized``, ``ping``, ``tools/list`` and ``tools/call``.
Every request gets a JSON-RPC envelope back (``result`` xor ``error``);
notifications get no body.
"""

import itertools
import json
import logging
import math
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import httpx
from fastapi import Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from webmall_bench.errors import CommerceError, NetworkError

logger = logging.getLogger(__name__)

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603

PROTOCOL_VERSION = "2024-11-05"

JSON_TYPES = {
    "string": (str,),
    "integer": (int,),
    "number": (int, float),
    "object": (dict,),
    "array": (list,),
    "boolean": (bool,),
}


class JsonRpcError(BaseModel):
    code: int
    message: str
    data: Optional[Any] = None


class ToolParam(BaseModel):
    name: str
    type: str = "string"
    description: str = ""
    required: bool = True


class ToolDescriptor(BaseModel):
    name: str
    description: str
    params: List[ToolParam] = Field(default_factory=list)

    def input_schema(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {p.name: {"type": p.type, "description": p.description} for p in self.params},
            "required": [p.name for p in self.params if p.required],
            "additionalProperties": False,
        }

    def to_wire(self) -> Dict[str, Any]:
        return {"name": self.name, "description": self.description, "inputSchema": self.input_schema()}


class ToolResult(BaseModel):
    content: Any
    is_error: bool = False

    def to_wire(self) -> Dict[str, Any]:
        return {
            "content": [{"type": "text", "text": json.dumps(self.content)}],
            "structuredContent": self.content,
            "isError": self.is_error,
        }


class CallContext(BaseModel):
    """Per-request data handed to tool handlers."""

    run_tag: Optional[str] = None


ToolHandler = Callable[[Dict[str, Any], CallContext], Union[ToolResult, Any]]


def validate_arguments(descriptor: ToolDescriptor, arguments: Any) -> Optional[str]:
    """Return an error message if ``arguments`` does not match the tool's schema, else None."""
    if not isinstance(arguments, dict):
        return "arguments must be an object"
    known = {p.name: p for p in descriptor.params}
    unknown = sorted(k for k in arguments if k not in known)
    if unknown:
        return f"unknown argument(s) for {descriptor.name}: {', '.join(unknown)}"
    for param in descriptor.params:
        if param.name not in arguments or arguments[param.name] is None:
            if param.required:
                return f"missing required argument {param.name!r}"
            continue
        value = arguments[param.name]
        expected = JSON_TYPES.get(param.type, (object,))
        if param.type != "boolean" and isinstance(value, bool):
            return f"argument {param.name!r} must be of type {param.type}"
        if not isinstance(value, expected):
            return f"argument {param.name!r} must be of type {param.type}"
    return None


def _response(request_id: Any, result: Any = None, error: Optional[JsonRpcError] = None) -> Dict[str, Any]:
    envelope: Dict[str, Any] = {"jsonrpc": "2.0", "id": request_id}
    if error is not None:
        envelope["error"] = error.model_dump(exclude_none=True)
    else:
        envelope["result"] = result
    return envelope


def _valid_id(value: Any) -> bool:
    if isinstance(value, float):
        return math.isfinite(value)
    return value is None or (isinstance(value, (str, int)) and not isinstance(value, bool))


class ToolServer:
    """A named set of tools answering JSON-RPC requests."""

    def __init__(self, name: str, version: str = "0.1.0"):
        self.name = name
        self.version = version
        self._tools: Dict[str, Tuple[ToolDescriptor, ToolHandler]] = {}

    def tool(self, descriptor: ToolDescriptor, handler: ToolHandler) -> None:
        if descriptor.name in self._tools:
            raise ValueError(f"duplicate tool {descriptor.name!r} on {self.name}")
        self._tools[descriptor.name] = (descriptor, handler)

    def list_tools(self) -> List[ToolDescriptor]:
        return [d for d, _ in self._tools.values()]

    def call_tool(
        self, name: str, arguments: Any, context: Optional[CallContext] = None
    ) -> Union[ToolResult, JsonRpcError]:
        entry = self._tools.get(name)
        if entry is None:
            return JsonRpcError(code=METHOD_NOT_FOUND, message=f"unknown tool {name!r}")
        descriptor, handler = entry
        problem = validate_arguments(descriptor, arguments)
        if problem:
            return JsonRpcError(code=INVALID_PARAMS, message=problem)
        try:
            outcome = handler(arguments, context or CallContext())
        except CommerceError as e:
            return ToolResult(content={"error": str(e)}, is_error=True)
        except Exception as e:
            logger.error(f"Tool {name} on {self.name} failed: {e}")
            return JsonRpcError(code=INTERNAL_ERROR, message="internal error")
        if isinstance(outcome, (ToolResult, JsonRpcError)):
            return outcome
        return ToolResult(content=outcome)

    def _dispatch(self, method: str, params: Any, context: CallContext) -> Union[Any, JsonRpcError]:
        if method == "initialize":
            return {
                "protocolVersion": PROTOCOL_VERSION,
                "serverInfo": {"name": self.name, "version": self.version},
                "capabilities": {"tools": {"listChanged": False}},
            }
        if method in ("notifications/initialized", "ping"):
            return {}
        if method == "tools/list":
            return {"tools": [d.to_wire() for d in self.list_tools()]}
        if method == "tools/call":
            if not isinstance(params, dict) or not isinstance(params.get("name"), str):
                return JsonRpcError(code=INVALID_PARAMS, message="tools/call requires a string 'name'")
            arguments = params.get("arguments")
            outcome = self.call_tool(params["name"], {} if arguments is None else arguments, context)
            return outcome if isinstance(outcome, JsonRpcError) else outcome.to_wire()
        return JsonRpcError(code=METHOD_NOT_FOUND, message=f"method not found: {method}")

    def handle_message(self, message: Any, context: Optional[CallContext] = None) -> Optional[Dict[str, Any]]:
        """Handle one decoded request object; None for notifications."""
        if not isinstance(message, dict):
            return _response(None, error=JsonRpcError(code=INVALID_REQUEST, message="request must be an object"))
        request_id = message.get("id")
        if not _valid_id(request_id):
            return _response(None, error=JsonRpcError(code=INVALID_REQUEST, message="invalid id"))
        if message.get("jsonrpc") != "2.0" or not isinstance(message.get("method"), str):
            return _response(request_id, error=JsonRpcError(code=INVALID_REQUEST, message="invalid request"))
        is_notification = "id" not in message
        params = message.get("params")
        if params is not None and not isinstance(params, (dict, list)):
            outcome: Any = JsonRpcError(code=INVALID_PARAMS, message="params must be an object or array")
        else:
            outcome = self._dispatch(message["method"], params, context or CallContext())
        if is_notification:
            return None
        if isinstance(outcome, JsonRpcError):
            return _response(request_id, error=outcome)
        return _response(request_id, result=outcome)

    def handle_payload(
        self, body: Union[bytes, str], context: Optional[CallContext] = None
    ) -> Optional[Union[Dict[str, Any], List[Dict[str, Any]]]]:
        """Decode a raw HTTP body (single request or batch) and answer it."""
        try:
            message = json.loads(body)
        except (ValueError, RecursionError):
            return _response(None, error=JsonRpcError(code=PARSE_ERROR, message="parse error"))
        if isinstance(message, list):
            if not message:
                return _response(None, error=JsonRpcError(code=INVALID_REQUEST, message="empty batch"))
            replies = [r for r in (self.handle_message(m, context) for m in message) if r is not None]
            return replies or None
        return self.handle_message(message, context)


def rpc_route(server: ToolServer, run_header: str = "X-Run-Id") -> Callable:
    """FastAPI endpoint answering POSTs for ``server``."""

    async def endpoint(request: Request) -> Response:
        body = await request.body()
        reply = server.handle_payload(body, CallContext(run_tag=request.headers.get(run_header)))
        if reply is None:
            return Response(status_code=202)
        return JSONResponse(reply)

    return endpoint


class JsonRpcClient:
    """Posts JSON-RPC requests through an injected httpx client."""

    def __init__(self, http: httpx.Client, headers: Optional[Dict[str, str]] = None):
        self.http = http
        self.headers = headers or {}
        self._ids = itertools.count(1)

    def request(self, url: str, method: str, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"jsonrpc": "2.0", "id": next(self._ids), "method": method}
        if params is not None:
            payload["params"] = params
        try:
            response = self.http.post(url, json=payload, headers=self.headers)
        except httpx.HTTPError as e:
            raise NetworkError(f"cannot reach {url}: {e}") from e
        if response.status_code != 200:
            raise NetworkError(f"{url} answered HTTP {response.status_code}")
        return response.json()

    def list_tools(self, url: str) -> List[Dict[str, Any]]:
        envelope = self.request(url, "tools/list")
        return envelope.get("result", {}).get("tools", [])

    def call_tool(self, url: str, name: str, arguments: Dict[str, Any]) -> Dict[str, Any]:
        return self.request(url, "tools/call", {"name": name, "arguments": arguments})
