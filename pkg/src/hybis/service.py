"""JSON-over-HTTP surface for the console core and the monitor.

A small stdlib HTTP server: GETs are read-only views (state, processes,
checkpoints, long-polled events), POSTs funnel through the same verbs the
REPL uses.  Every response carries the current guest step so a client can
tell how stale its view is.  Static files (the web console) are served from
an optional directory at the root path.
"""

from __future__ import annotations

import json
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .console import ConsoleCore
from .dumps import open_dump
from .errors import (
    AlreadyUnlinked,
    BadArguments,
    CorruptDebugBlock,
    HybisError,
    InvalidConfig,
    KernelDebugBlockNotFound,
    NoOpenSession,
    NoSuchPid,
    NotAProcessObject,
    NotTerminated,
    OutOfRange,
    SizeMismatch,
    UnknownCommand,
    UnknownFinding,
)
from . import introspect

_STATUS_BY_ERROR: dict[type, int] = {
    BadArguments: 400,
    InvalidConfig: 400,
    NoOpenSession: 400,
    OutOfRange: 400,
    UnknownCommand: 400,
    SizeMismatch: 400,
    NotTerminated: 400,
    NoSuchPid: 404,
    NotAProcessObject: 404,
    UnknownFinding: 404,
    AlreadyUnlinked: 409,
    KernelDebugBlockNotFound: 422,
    CorruptDebugBlock: 422,
}

MAX_LONGPOLL_SECONDS = 30.0
DEFAULT_LONGPOLL_SECONDS = 10.0


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def _to_api_error(exc: Exception) -> ApiError:
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, HybisError):
        status = _STATUS_BY_ERROR.get(type(exc), 500)
        return ApiError(status, exc.code, str(exc))
    return ApiError(500, type(exc).__name__, str(exc))


class ApiHandlers:
    """Endpoint implementations, independent of the HTTP plumbing."""

    def __init__(self, core: ConsoleCore | None):
        self.core = core

    def _require_core(self) -> ConsoleCore:
        if self.core is None:
            raise ApiError(503, "GuestNotAttached", "no guest machine is attached")
        return self.core

    def _with_step(self, payload: dict) -> dict:
        core = self.core
        if core is not None:
            payload["step"] = core.guest.clock
        return payload

    # -- GET ---------------------------------------------------------------

    def get_state(self, query: dict) -> dict:
        core = self._require_core()
        return self._with_step(core.state())

    def get_processes(self, query: dict) -> dict:
        core = self._require_core()
        source = query.get("source", ["live"])[0]
        if source == "live":
            report = introspect.cross_view(core.port, core.profile, source_description="live")
        elif source == "session":
            session = core._require_session()
            with open_dump(session.manifest) as dump_source:
                report = introspect.cross_view(
                    dump_source,
                    core.profile,
                    source_description=f"session:{session.id} ckpt:{session.manifest.latest_id}",
                )
        else:
            raise BadArguments(f"source must be live or session, not {source!r}")
        return self._with_step(report.to_json())

    def get_checkpoints(self, query: dict) -> dict:
        core = self._require_core()
        return self._with_step({"checkpoints": core.checkpoints()})

    def get_events(self, query: dict) -> dict:
        core = self._require_core()
        try:
            since = int(query.get("since", ["0"])[0])
            timeout = float(query.get("timeout", [str(DEFAULT_LONGPOLL_SECONDS)])[0])
        except ValueError as exc:
            raise BadArguments(f"bad events query: {exc}") from exc
        timeout = max(0.0, min(timeout, MAX_LONGPOLL_SECONDS))
        events = core.monitor.events_since(since, timeout=timeout)
        return self._with_step({"events": [e.to_json() for e in events]})

    # -- POST ----------------------------------------------------------------

    def post_dump(self, body: dict) -> dict:
        core = self._require_core()
        rng = body.get("range")
        if rng is None:
            manifest, path = core.dumpmem(body.get("path"))
            return self._with_step(
                {"path": path, "memory_size": manifest.memory_size}
            )
        try:
            start, length = int(rng[0]), int(rng[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise BadArguments("range must be [start, length]") from exc
        checkpoint = core.dumprangediff(start, length)
        return self._with_step({"checkpoint": checkpoint.to_json()})

    def post_block(self, body: dict) -> dict:
        core = self._require_core()
        address = body.get("address")
        if isinstance(address, str):
            try:
                address = int(address, 0)
            except ValueError as exc:
                raise BadArguments(f"bad address {address!r}") from exc
        if not isinstance(address, int):
            raise BadArguments("body must carry an integer address")
        receipt = core.psblock(address, unlink_tracking=bool(body.get("unlink_tracking")))
        return self._with_step({"receipt": receipt.to_json()})

    def post_decision(self, body: dict) -> dict:
        core = self._require_core()
        try:
            finding_id = int(body["finding_id"])
            action = str(body["action"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BadArguments("body must carry finding_id and action") from exc
        if action not in ("BLOCK", "OBSERVE"):
            raise BadArguments(f"action must be BLOCK or OBSERVE, not {action!r}")
        finding = core.monitor.decide(finding_id, action)
        return self._with_step({"finding": finding.to_json()})


class ApiServer:
    """Threaded HTTP server bound to localhost by default."""

    def __init__(
        self,
        core: ConsoleCore | None,
        host: str = "127.0.0.1",
        port: int = 0,
        static_dir: str | Path | None = None,
    ):
        self.handlers = ApiHandlers(core)
        self.static_dir = Path(static_dir) if static_dir else None
        handlers = self.handlers
        static = self.static_dir

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet by default
                pass

            def _send_json(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _run(self, fn, arg) -> None:
                try:
                    self._send_json(200, fn(arg))
                except Exception as exc:
                    err = _to_api_error(exc)
                    payload = {"error": err.code, "message": str(err)}
                    if handlers.core is not None:
                        payload["step"] = handlers.core.guest.clock
                    self._send_json(err.status, payload)

            def do_GET(self):
                parsed = urlparse(self.path)
                query = parse_qs(parsed.query)
                routes = {
                    "/api/state": handlers.get_state,
                    "/api/processes": handlers.get_processes,
                    "/api/checkpoints": handlers.get_checkpoints,
                    "/api/events": handlers.get_events,
                }
                fn = routes.get(parsed.path)
                if fn is not None:
                    self._run(fn, query)
                    return
                if static is not None and not parsed.path.startswith("/api/"):
                    self._serve_static(parsed.path)
                    return
                self._send_json(404, {"error": "NotFound", "message": parsed.path})

            def do_POST(self):
                parsed = urlparse(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw.decode("utf-8")) if raw else {}
                    if not isinstance(body, dict):
                        raise ValueError("body must be a JSON object")
                except (ValueError, UnicodeDecodeError) as exc:
                    self._send_json(400, {"error": "BadArguments", "message": str(exc)})
                    return
                routes = {
                    "/api/dump": handlers.post_dump,
                    "/api/block": handlers.post_block,
                    "/api/decision": handlers.post_decision,
                }
                fn = routes.get(parsed.path)
                if fn is None:
                    self._send_json(404, {"error": "NotFound", "message": parsed.path})
                    return
                self._run(fn, body)

            def _serve_static(self, path: str) -> None:
                rel = path.lstrip("/") or "index.html"
                target = (static / rel).resolve()
                if not str(target).startswith(str(static.resolve())) or not target.is_file():
                    self._send_json(404, {"error": "NotFound", "message": path})
                    return
                data = target.read_bytes()
                ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name="hybis-api",
            daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self._server.server_close()
