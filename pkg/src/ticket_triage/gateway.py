"""Ticketing-system client and an in-process mock server speaking the same
protocol.

The wire shape loosely follows a Freshdesk-style v2 API::

    GET  /api/v2/tickets?updated_since=<RFC3339>&page=<n>&per_page=<k>
    PUT  /api/v2/tickets/<id>          {"custom_fields": {...}}
    POST /api/v2/tickets/<id>/reply    {"body": "...", "auto_close": bool}

Payloads are JSON objects whose keys are the :class:`Ticket` field names.
Timestamps are RFC3339 UTC. Requests authenticate with
``Authorization: Bearer <api_key>``.
"""

from __future__ import annotations

import errno
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping, Sequence
from urllib.parse import parse_qs, urlsplit

import requests

from .errors import (AuthError, EmptyBody, GatewayError, MalformedPayload,
                     NotFound, PortInUse, RateLimited, Transport)
from .timeutil import format_rfc3339, parse_rfc3339, utcnow

logger = logging.getLogger(__name__)

CHANNELS = ("email", "app_review", "social", "web")
STATUSES = ("open", "pending", "closed")


@dataclass(frozen=True)
class Ticket:
    id: int
    subject: str
    body: str
    created_at: datetime
    updated_at: datetime
    requester_name: str | None = None
    channel: str = "email"
    status: str = "open"
    custom_fields: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.id, int) or self.id < 1:
            raise ValueError("ticket id must be a positive integer")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.updated_at < self.created_at:
            raise ValueError("updated_at precedes created_at")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "subject": self.subject,
            "body": self.body,
            "requester_name": self.requester_name,
            "channel": self.channel,
            "status": self.status,
            "created_at": format_rfc3339(self.created_at),
            "updated_at": format_rfc3339(self.updated_at),
            "custom_fields": dict(self.custom_fields),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Ticket":
        try:
            cf = d.get("custom_fields") or {}
            if not isinstance(cf, dict):
                raise TypeError("custom_fields must be an object")
            return cls(
                id=d["id"] if isinstance(d["id"], int) else int(d["id"]),
                subject=str(d.get("subject") or ""),
                body=str(d.get("body") or ""),
                requester_name=d.get("requester_name"),
                channel=d.get("channel", "email"),
                status=d.get("status", "open"),
                created_at=parse_rfc3339(d["created_at"]),
                updated_at=parse_rfc3339(d["updated_at"]),
                custom_fields={str(k): str(v) for k, v in cf.items()},
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedPayload(f"bad ticket record: {exc}") from exc


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str
    api_key: str
    page_size: int = 100
    request_timeout: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _retry_after(resp: requests.Response) -> float | None:
    hint = resp.headers.get("Retry-After")
    if hint is None:
        return None
    try:
        return max(0.0, float(hint))
    except ValueError:
        return None


class GatewayClient:
    """Blocking HTTP client with bounded retries.

    429 and 5xx responses and network failures are retried up to
    ``max_retries`` times with exponential backoff. A ``Retry-After`` hint
    replaces the computed delay. ``attempt_log`` records
    ``(method, path, attempts)`` for each logical call.
    """

    def __init__(self, config: GatewayConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.sleep = sleep
        self.attempt_log: list[tuple[str, str, int]] = []
        self._lock = threading.Lock()

    def _request(self, method: str, path: str, params=None, payload=None):
        cfg = self.config
        url = cfg.base_url.rstrip("/") + path
        headers = {"Authorization": f"Bearer {cfg.api_key}"}
        last: Exception | None = None
        attempts = 0
        try:
            for attempt in range(cfg.max_retries + 1):
                attempts += 1
                delay = cfg.backoff_base * (2 ** attempt)
                try:
                    resp = requests.request(method, url, params=params, json=payload,
                                            headers=headers, timeout=cfg.request_timeout)
                except requests.RequestException as exc:
                    last = Transport(f"{method} {path}: {exc}")
                else:
                    status = resp.status_code
                    if status == 401:
                        raise AuthError(f"{method} {path}: unauthorized")
                    if status == 404:
                        raise NotFound(f"{method} {path}: not found")
                    if status == 429:
                        last = RateLimited(f"{method} {path}: rate limited")
                        hint = _retry_after(resp)
                        if hint is not None:
                            delay = hint
                    elif status >= 500:
                        last = Transport(f"{method} {path}: server error {status}")
                    elif status >= 400:
                        raise self._client_error(method, path, resp)
                    else:
                        try:
                            return resp.json()
                        except ValueError as exc:
                            raise MalformedPayload(f"{method} {path}: body is not JSON") from exc
                if attempt < cfg.max_retries:
                    logger.debug("retrying %s %s in %.3fs (%s)", method, path, delay, last)
                    self.sleep(delay)
            assert last is not None
            raise last
        finally:
            with self._lock:
                self.attempt_log.append((method, path, attempts))

    @staticmethod
    def _client_error(method, path, resp) -> GatewayError:
        try:
            err = resp.json().get("error", "")
        except (ValueError, AttributeError):
            err = ""
        if err == "empty_body":
            return EmptyBody(f"{method} {path}: empty reply body")
        return GatewayError(f"{method} {path}: HTTP {resp.status_code} {err}".rstrip())

    def fetch_updated_since(self, since: datetime) -> list[Ticket]:
        """All tickets with ``updated_at >= since`` across pages, in (updated_at, id) order."""
        tickets: dict[int, Ticket] = {}
        page = 1
        while True:
            data = self._request("GET", "/api/v2/tickets", params={
                "updated_since": format_rfc3339(since),
                "page": page, "per_page": self.config.page_size})
            if not isinstance(data, list):
                raise MalformedPayload("ticket listing must be a JSON array")
            for rec in data:
                t = Ticket.from_dict(rec)
                tickets[t.id] = t
            if len(data) < self.config.page_size:
                break
            page += 1
        return sorted(tickets.values(), key=lambda t: (t.updated_at, t.id))

    def update_ticket_fields(self, ticket_id: int, fields: Mapping[str, str]) -> dict:
        data = self._request("PUT", f"/api/v2/tickets/{int(ticket_id)}",
                             payload={"custom_fields": dict(fields)})
        if not isinstance(data, dict):
            raise MalformedPayload("update acknowledgement must be an object")
        return data

    def post_reply(self, ticket_id: int, body: str, auto_close: bool = False) -> dict:
        if not body or not body.strip():
            raise EmptyBody("reply body is empty")
        data = self._request("POST", f"/api/v2/tickets/{int(ticket_id)}/reply",
                             payload={"body": body, "auto_close": bool(auto_close)})
        if not isinstance(data, dict):
            raise MalformedPayload("reply acknowledgement must be an object")
        return data


def fetch_updated_since(config: GatewayConfig, since: datetime) -> list[Ticket]:
    return GatewayClient(config).fetch_updated_since(since)


def update_ticket_fields(config: GatewayConfig, ticket_id: int, fields: Mapping[str, str]) -> dict:
    return GatewayClient(config).update_ticket_fields(ticket_id, fields)


def post_reply(config: GatewayConfig, ticket_id: int, body: str, auto_close: bool = False) -> dict:
    return GatewayClient(config).post_reply(ticket_id, body, auto_close)


# -- mock server -------------------------------------------------------------

@dataclass
class RequestLogEntry:
    method: str
    path: str
    query: dict
    status: int
    body: dict | None = None


class MockState:
    """Server-side ticket store; every mutation holds the lock."""

    def __init__(self, tickets: Sequence[Ticket], api_key: str, fault_rate: float,
                 fault_codes: Sequence[int], seed: int, retry_after: float,
                 clock: Callable[[], datetime]):
        ids = [t.id for t in tickets]
        if len(set(ids)) != len(ids):
            raise ValueError("fixture ticket ids must be unique")
        if not 0.0 <= fault_rate <= 1.0:
            raise ValueError("fault_rate must be in [0, 1]")
        self.tickets: dict[int, Ticket] = {t.id: t for t in tickets}
        self.conversations: dict[int, list[dict]] = {t.id: [] for t in tickets}
        self.api_key = api_key
        self.fault_rate = fault_rate
        self.fault_codes = tuple(fault_codes)
        self.rng = random.Random(seed)
        self.retry_after = retry_after
        self.clock = clock
        self.log: list[RequestLogEntry] = []
        self.lock = threading.Lock()

    def _touch(self, t: Ticket, **changes) -> Ticket:
        now = max(t.updated_at, self.clock())
        new = replace(t, updated_at=now, **changes)
        self.tickets[t.id] = new
        return new

    def handle(self, method: str, raw_path: str, headers, body: bytes):
        parts = urlsplit(raw_path)
        path = parts.path.rstrip("/")
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        payload = None
        with self.lock:
            if body:
                try:
                    payload = json.loads(body)
                except ValueError:
                    payload = None
            status, out, extra = self._dispatch(method, path, query, headers, body, payload)
            self.log.append(RequestLogEntry(method, path, query, status,
                                            payload if isinstance(payload, dict) else None))
        return status, out, extra

    def _dispatch(self, method, path, query, headers, body, payload):
        if self.fault_rate and self.rng.random() < self.fault_rate:
            code = self.fault_codes[self.rng.randrange(len(self.fault_codes))]
            extra = {"Retry-After": format(self.retry_after, "g")} if code == 429 else {}
            return code, {"error": "injected_fault"}, extra
        if headers.get("Authorization") != f"Bearer {self.api_key}":
            return 401, {"error": "unauthorized"}, {}

        segs = path.split("/")
        if segs[:4] != ["", "api", "v2", "tickets"]:
            return 404, {"error": "no_route"}, {}
        if method == "GET" and len(segs) == 4:
            return self._list(query)
        if len(segs) < 5:
            return 405, {"error": "method_not_allowed"}, {}
        try:
            tid = int(segs[4])
        except ValueError:
            return 404, {"error": "not_found"}, {}
        if tid not in self.tickets:
            return 404, {"error": "not_found"}, {}
        if method == "PUT" and len(segs) == 5:
            if not isinstance(payload, dict) or not isinstance(payload.get("custom_fields"), dict):
                return 400, {"error": "bad_request"}, {}
            t = self.tickets[tid]
            merged = {**t.custom_fields,
                      **{str(k): str(v) for k, v in payload["custom_fields"].items()}}
            return 200, self._touch(t, custom_fields=merged).to_dict(), {}
        if method == "POST" and len(segs) == 6 and segs[5] == "reply":
            if not isinstance(payload, dict):
                return 400, {"error": "bad_request"}, {}
            text = payload.get("body")
            if not isinstance(text, str) or not text.strip():
                return 400, {"error": "empty_body"}, {}
            conv = self.conversations[tid]
            conv.append({"body": text, "auto_close": bool(payload.get("auto_close"))})
            t = self.tickets[tid]
            changes = {"status": "closed"} if payload.get("auto_close") else {}
            self._touch(t, **changes)
            return 201, {"ticket_id": tid, "conversation_length": len(conv)}, {}
        return 405, {"error": "method_not_allowed"}, {}

    def _list(self, query):
        try:
            since = parse_rfc3339(query["updated_since"]) if "updated_since" in query else None
            page = int(query.get("page", 1))
            per_page = int(query.get("per_page", 30))
            if page < 1 or per_page < 1:
                raise ValueError
        except ValueError:
            return 400, {"error": "bad_query"}, {}
        rows = sorted((t for t in self.tickets.values()
                       if since is None or t.updated_at >= since),
                      key=lambda t: (t.updated_at, t.id))
        chunk = rows[(page - 1) * per_page: page * per_page]
        return 200, [t.to_dict() for t in chunk], {}


class _Handler(BaseHTTPRequestHandler):
    state: MockState  # set on the subclass built per server

    def _serve(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        status, out, extra = self.state.handle(self.command, self.path, self.headers, body)
        data = json.dumps(out).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        for k, v in extra.items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)

    do_GET = do_PUT = do_POST = _serve

    def log_message(self, fmt, *args):
        logger.debug("mock: " + fmt, *args)


class MockServer:
    """Handle for a running mock; also a context manager."""

    def __init__(self, httpd: ThreadingHTTPServer, state: MockState):
        self.httpd = httpd
        self.state = state
        self.thread = threading.Thread(target=httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                       daemon=True)
        self.thread.start()

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def log(self) -> list[RequestLogEntry]:
        with self.state.lock:
            return list(self.state.log)

    def requests_matching(self, method: str, suffix: str = "", status: int | None = None):
        return [e for e in self.log if e.method == method and e.path.endswith(suffix)
                and (status is None or e.status == status)]

    def ticket(self, ticket_id: int) -> Ticket:
        with self.state.lock:
            return self.state.tickets[ticket_id]

    def conversation(self, ticket_id: int) -> list[dict]:
        with self.state.lock:
            return list(self.state.conversations[ticket_id])

    def set_fault_rate(self, rate: float):
        with self.state.lock:
            self.state.fault_rate = rate

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def load_fixture(path) -> list[Ticket]:
    """Read a fixture: a JSON array of tickets or ``{"tickets": [...]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get("tickets", [])
    return [Ticket.from_dict(d) for d in data]


def run_mock_server(fixture: Sequence[Ticket] = (), port: int = 0, api_key: str = "test-key",
                    fault_rate: float = 0.0, fault_codes: Sequence[int] = (429,),
                    seed: int = 0, retry_after: float = 0.0,
                    clock: Callable[[], datetime] = utcnow, host: str = "127.0.0.1") -> MockServer:
    """Start the mock on a background thread; ``port=0`` picks a free port.

    With ``fault_rate > 0`` that fraction of requests (drawn from a seeded
    generator) is answered with one of ``fault_codes`` before any
    processing, so a faulted request never mutates state.
    """
    state = MockState(list(fixture), api_key, fault_rate, fault_codes, seed, retry_after, clock)
    handler = type("MockHandler", (_Handler,), {"state": state})
    try:
        httpd = ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(f"port {port} is already in use") from exc
        raise
    httpd.daemon_threads = True
    return MockServer(httpd, state)
