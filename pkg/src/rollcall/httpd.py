"""Small JSON-over-HTTP server on the standard library.

Thread per request (long-poll handlers simply block), template path routing
("/api/v1/cards/{uid}/state"), CORS for the dashboard origin, and a uniform
error envelope {"error": <code>, ...}.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlparse

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str = "", extra: dict | None = None):
        super().__init__(message or code)
        self.status = status
        self.code = code
        self.extra = extra or {}

    def body(self) -> dict:
        out = {"error": self.code}
        if self.args and self.args[0]:
            out["message"] = self.args[0]
        out.update(self.extra)
        return out


@dataclass
class Request:
    method: str
    path: str
    params: dict            # path template parameters
    query: dict             # first value per key
    body: dict | None
    headers: dict
    principal: object | None = None

    def q(self, key: str, default: str | None = None) -> str | None:
        return self.query.get(key, default)


@dataclass
class Route:
    method: str
    segments: list
    route_key: str
    handler: Callable

    def match(self, method: str, parts: list) -> dict | None:
        if method != self.method or len(parts) != len(self.segments):
            return None
        params = {}
        for seg, part in zip(self.segments, parts):
            if seg.startswith("{") and seg.endswith("}"):
                params[seg[1:-1]] = part
            elif seg != part:
                return None
        return params

    def match_path_only(self, parts: list) -> bool:
        if len(parts) != len(self.segments):
            return False
        for seg, part in zip(self.segments, parts):
            if not (seg.startswith("{") and seg.endswith("}")) and seg != part:
                return False
        return True


class Router:
    def __init__(self):
        self.routes: list[Route] = []

    def add(self, method: str, pattern: str, route_key: str, handler: Callable) -> None:
        self.routes.append(Route(method, pattern.strip("/").split("/"), route_key, handler))

    def resolve(self, method: str, path: str):
        parts = path.strip("/").split("/")
        path_exists = False
        for route in self.routes:
            params = route.match(method, parts)
            if params is not None:
                return route, params
            if route.match_path_only(parts):
                path_exists = True
        if path_exists:
            raise ApiError(405, "method_not_allowed")
        raise ApiError(404, "not_found", f"no route for {method} {path}")


class JsonApiServer:
    """Wires a Router plus an authenticator into a ThreadingHTTPServer."""

    def __init__(self, host: str, port: int, router: Router,
                 authenticate: Callable, cors_origin: str = "*"):
        self.router = router
        self.authenticate = authenticate
        self.cors_origin = cors_origin
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            # without this, split response writes stall on delayed ACKs (~40 ms)
            disable_nagle_algorithm = True

            def log_message(self, fmt, *args):
                log.debug("http: " + fmt, *args)

            def _cors(self):
                self.send_header("Access-Control-Allow-Origin", outer.cors_origin)
                self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS")

            def _reply(self, status: int, payload, content_type="application/json"):
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self._cors()
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_OPTIONS(self):
                self._reply(204, b"", content_type="text/plain")

            def _dispatch(self, method: str):
                parsed = urlparse(self.path)
                try:
                    route, params = outer.router.resolve(method, parsed.path)
                    query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                    body = None
                    length = int(self.headers.get("Content-Length") or 0)
                    if length:
                        try:
                            body = json.loads(self.rfile.read(length))
                        except json.JSONDecodeError:
                            raise ApiError(400, "bad_json") from None
                    request = Request(method=method, path=parsed.path, params=params,
                                      query=query, body=body, headers=dict(self.headers))
                    request.principal = outer.authenticate(route.route_key, request)
                    result = route.handler(request)
                    if isinstance(result, tuple):  # (payload_bytes, content_type)
                        self._reply(200, result[0], content_type=result[1])
                    else:
                        self._reply(200, result)
                except ApiError as exc:
                    self._reply(exc.status, exc.body())
                except BrokenPipeError:
                    pass
                except Exception:
                    log.exception("handler failure for %s %s", method, self.path)
                    self._reply(500, {"error": "internal"})

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_PATCH(self):
                self._dispatch("PATCH")

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="api-server", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
