"""JSON-over-HTTP access to the query queue for human labelers.

    GET  /api/queries/next         oldest pending query, or 204
    POST /api/queries/<id>/label   body {"choice": "prefer0" | "prefer1" | "skip"}
    GET  /api/status               {feedback_used, max_feedback, pending_count, global_step}

Handlers only touch the queue (which has its own lock) and a status callback,
so the training thread never waits on a request.
"""
from __future__ import annotations

import json
import logging
import mimetypes
import re
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

from .oracle import AlreadyResolvedError, QueryQueue, UnknownQueryError
from .reward_model import BudgetExhaustedError

log = logging.getLogger(__name__)

_LABEL_PATH = re.compile(r"^/api/queries/([^/]+)/label/?$")
MAX_BODY = 64 * 1024


class LabelServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, queue: QueryQueue, global_step: Callable[[], int] = lambda: 0,
                 static_dir=None):
        self.queue = queue
        self.global_step = global_step
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def status(self) -> dict:
        return {**self.queue.status(), "global_step": int(self.global_step())}

    def serve_in_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="label-server", daemon=True)
        t.start()
        return t


class _Handler(BaseHTTPRequestHandler):
    server: LabelServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, code: int, payload=None):
        body = b"" if payload is None else json.dumps(payload).encode()
        self.send_response(code)
        if payload is not None:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _error(self, code: int, message: str):
        self._send_json(code, {"error": message})

    def do_GET(self):
        path = self.path.split("?", 1)[0]
        if path == "/api/queries/next":
            rec = self.server.queue.next_pending()
            if rec is None:
                self._send_json(HTTPStatus.NO_CONTENT)
            else:
                self._send_json(HTTPStatus.OK, rec.to_json())
        elif path == "/api/status":
            self._send_json(HTTPStatus.OK, self.server.status())
        elif path.startswith("/api/"):
            self._error(HTTPStatus.NOT_FOUND, f"no such endpoint: {path}")
        else:
            self._serve_static(path)

    def do_POST(self):
        path = self.path.split("?", 1)[0]
        m = _LABEL_PATH.match(path)
        if not m:
            self._error(HTTPStatus.NOT_FOUND, f"no such endpoint: {path}")
            return
        try:
            query_id = int(m.group(1))
        except ValueError:
            self._error(HTTPStatus.NOT_FOUND, f"unknown query id {m.group(1)!r}")
            return
        choice, problem = self._read_choice()
        if problem:
            self._error(HTTPStatus.BAD_REQUEST, problem)
            return
        queue = self.server.queue
        try:
            queue.submit_label(query_id, choice)
        except UnknownQueryError:
            self._error(HTTPStatus.NOT_FOUND, f"unknown query id {query_id}")
            return
        except AlreadyResolvedError as exc:
            self._error(HTTPStatus.CONFLICT, str(exc))
            return
        except BudgetExhaustedError as exc:
            self._error(HTTPStatus.CONFLICT, str(exc))
            return
        self._send_json(HTTPStatus.OK, {"id": query_id, "choice": choice,
                                        "status": queue.get(query_id).status,
                                        **self.server.status()})

    def _read_choice(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            return None, "bad Content-Length header"
        if length <= 0:
            return None, 'request body must be JSON like {"choice": "prefer0"}'
        if length > MAX_BODY:
            return None, "request body too large"
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return None, f"body is not valid JSON: {exc}"
        if not isinstance(body, dict) or "choice" not in body:
            return None, 'body must be an object with a "choice" field'
        choice = body["choice"]
        if choice not in ("prefer0", "prefer1", "skip"):
            return None, f'choice must be "prefer0", "prefer1" or "skip", got {choice!r}'
        return choice, None

    def _serve_static(self, path: str):
        root = self.server.static_dir
        if root is None:
            self._error(HTTPStatus.NOT_FOUND, "no static directory configured")
            return
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if root not in target.parents and target != root:
            self._error(HTTPStatus.NOT_FOUND, "not found")
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._error(HTTPStatus.NOT_FOUND, "not found")
            return
        data = target.read_bytes()
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", mimetypes.guess_type(target.name)[0] or "application/octet-stream")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)
