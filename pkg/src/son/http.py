"""HTTP-style API plumbing for the gatekeeper.

The gatekeeper handles :class:`ApiRequest` objects; endpoints abstract how
requests reach a platform: in-process (:class:`LocalEndpoint`) or over real
HTTP (:class:`HttpEndpoint` plus the WSGI adapter).  Every platform instance
serves the identical API, which is what makes recursive deployments work.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol
from wsgiref.simple_server import WSGIRequestHandler, WSGIServer, make_server

import requests

from son.errors import PlatformError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApiRequest:
    method: str
    path: str
    token: Optional[str] = None
    query: dict[str, str] = field(default_factory=dict)
    body: Optional[bytes] = None

    def json(self) -> Any:
        if not self.body:
            return {}
        return json.loads(self.body.decode("utf-8"))


@dataclass(frozen=True)
class ApiResponse:
    status: int
    body: Any = None  # JSON document, or raw bytes for binary responses

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def json_bytes(self) -> bytes:
        if isinstance(self.body, bytes):
            return self.body
        return json.dumps(self.body if self.body is not None else {}).encode("utf-8")


class EndpointError(PlatformError):
    """The endpoint could not be reached at the transport level."""


class Endpoint(Protocol):
    """Anything that can carry a gatekeeper API request."""

    def send(self, request: ApiRequest) -> ApiResponse: ...

    def describe(self) -> str: ...


class LocalEndpoint:
    """Dispatches directly into an in-process gatekeeper."""

    def __init__(self, gatekeeper) -> None:
        self._gatekeeper = gatekeeper

    def send(self, request: ApiRequest) -> ApiResponse:
        return self._gatekeeper.handle(request)

    def describe(self) -> str:
        return f"local:{self._gatekeeper.platform_id}"


class HttpEndpoint:
    """Carries requests over real HTTP with bearer-token auth."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def send(self, request: ApiRequest) -> ApiResponse:
        headers = {}
        if request.token:
            headers["Authorization"] = f"Bearer {request.token}"
        is_json = request.method in ("POST", "PUT") and not isinstance(request.body, bytes)
        try:
            response = self._session.request(
                request.method,
                self.base_url + request.path,
                params=request.query or None,
                data=request.body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise EndpointError(f"{self.base_url}: {exc}") from exc
        try:
            body = response.json()
        except ValueError:
            body = response.content
        return ApiResponse(status=response.status_code, body=body)

    def describe(self) -> str:
        return self.base_url


def resolve_endpoint(address: str | Endpoint) -> Endpoint:
    if isinstance(address, str):
        return HttpEndpoint(address)
    return address


# ---------------------------------------------------------------------------
# WSGI serving
# ---------------------------------------------------------------------------

def make_wsgi_app(gatekeeper):
    """Wraps a gatekeeper into a WSGI application."""

    def app(environ, start_response):
        token = None
        auth = environ.get("HTTP_AUTHORIZATION", "")
        if auth.startswith("Bearer "):
            token = auth[len("Bearer ") :]
        length = int(environ.get("CONTENT_LENGTH") or 0)
        body = environ["wsgi.input"].read(length) if length else None
        query = {}
        for pair in (environ.get("QUERY_STRING") or "").split("&"):
            if "=" in pair:
                key, _, value = pair.partition("=")
                query[key] = value
        request = ApiRequest(
            method=environ["REQUEST_METHOD"],
            path=environ.get("PATH_INFO", "/"),
            token=token,
            query=query,
            body=body,
        )
        response = gatekeeper.handle(request)
        payload = response.json_bytes()
        start_response(
            f"{response.status} {_REASONS.get(response.status, 'Status')}",
            [("Content-Type", "application/json"), ("Content-Length", str(len(payload)))],
        )
        return [payload]

    return app


_REASONS = {
    200: "OK",
    201: "Created",
    400: "Bad Request",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    409: "Conflict",
    422: "Unprocessable Entity",
    502: "Bad Gateway",
    500: "Internal Server Error",
}


class _ThreadingWSGIServer(WSGIServer):
    """Handles each request on its own thread (delegation must not block the
    server while the parent polls)."""

    daemon_threads = True

    def process_request(self, request, client_address):
        thread = threading.Thread(
            target=self._handle_one, args=(request, client_address), daemon=True
        )
        thread.start()

    def _handle_one(self, request, client_address):
        try:
            self.finish_request(request, client_address)
        except Exception:
            self.handle_error(request, client_address)
        finally:
            self.shutdown_request(request)


class _QuietHandler(WSGIRequestHandler):
    def log_message(self, format, *args):  # noqa: A002 - WSGI signature
        log.debug("http %s", format % args)


class ApiServer:
    """Serves a gatekeeper over HTTP on a background thread."""

    def __init__(self, gatekeeper, host: str = "127.0.0.1", port: int = 0):
        self._server = make_server(
            host,
            port,
            make_wsgi_app(gatekeeper),
            server_class=_ThreadingWSGIServer,
            handler_class=_QuietHandler,
        )
        self.host, self.port = self._server.server_address[:2]
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
