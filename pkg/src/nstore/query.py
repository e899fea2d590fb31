"""HTTP read API: browse, detail, conditional, joint, composed.

Endpoints (JSON in, JSON out, HTTP/1.1 keep-alive)::

    GET  /v1/health
    GET  /v1/{topic}/browse?page=0&page_size=50
    GET  /v1/{topic}/detail?id=<32 hex>
    POST /v1/{topic}/query     {"predicate": ..., "page": 0, "page_size": 50}
    POST /v1/{topic}/joint     {"predicate": ..., "relation": ..., "direction": ...}
    POST /v1/{topic}/composed  {"seed_predicate": ..., "steps": [{"relation","direction"}...]}

Responses carry total_count, as_of_lsn, elapsed_us and items (canonical
entity documents with incident relations). Errors are {code, message}
with 4xx/5xx status. Reads route replica-first when configured, falling
back to the primary.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from nstore import predicate as pred_mod
from nstore.model import RelationKind, TopicKind, dumps_canonical, entity_doc
from nstore.store import (
    MetaStore,
    PageSizeOutOfRange,
    RelationTopicMismatch,
    StoreClosed,
)
from nstore.transport import ConnectionClosed, TransportError

log = logging.getLogger("nstore.query")

DEFAULT_PAGE_SIZE = 50
MAX_COMPOSED_STEPS = 4


class QueryError(Exception):
    status = 400
    code = "bad_request"

    def __init__(self, message: str, code: str | None = None, status: int | None = None):
        super().__init__(message)
        if code:
            self.code = code
        if status:
            self.status = status


@dataclass(frozen=True)
class QueryRequest:
    kind: str  # browse | detail | conditional | joint | composed
    topic: TopicKind
    predicate: pred_mod.Predicate | None = None
    relation: RelationKind | None = None
    direction: str = "from"
    steps: tuple[tuple[RelationKind, str], ...] = ()
    entity_id: bytes | None = None
    page: int = 0
    page_size: int = DEFAULT_PAGE_SIZE


def _parse_topic(raw: str) -> TopicKind:
    try:
        return TopicKind(raw)
    except ValueError:
        raise QueryError(f"unknown topic {raw!r}", code="unknown_topic") from None


def _parse_relation(raw) -> RelationKind:
    try:
        return RelationKind(raw)
    except ValueError:
        raise QueryError(f"unknown relation {raw!r}", code="unknown_relation") from None


def _parse_predicate(raw) -> pred_mod.Predicate | None:
    if raw is None:
        return None
    try:
        return pred_mod.parse(raw)
    except pred_mod.UnknownField as exc:
        raise QueryError(str(exc), code="unknown_field") from exc
    except pred_mod.PredicateError as exc:
        raise QueryError(str(exc), code="bad_predicate") from exc


def _parse_page(doc: dict) -> tuple[int, int]:
    try:
        page = int(doc.get("page", 0))
        page_size = int(doc.get("page_size", DEFAULT_PAGE_SIZE))
    except (TypeError, ValueError):
        raise QueryError("page and page_size must be integers") from None
    return page, page_size


def parse_request(method: str, path: str, body: dict | None) -> QueryRequest:
    parts = [p for p in path.split("/") if p]
    if len(parts) != 3 or parts[0] != "v1":
        raise QueryError(f"no such endpoint {path!r}", code="not_found", status=404)
    topic = _parse_topic(parts[1])
    action = parts[2]
    doc = body or {}

    if method == "GET" and action == "browse":
        page, page_size = _parse_page(doc)
        return QueryRequest("browse", topic, page=page, page_size=page_size)
    if method == "GET" and action == "detail":
        raw = doc.get("id")
        if not isinstance(raw, str) or len(raw) != 32:
            raise QueryError("detail needs id=<32 hex digits>")
        try:
            entity_id = bytes.fromhex(raw)
        except ValueError:
            raise QueryError("detail needs id=<32 hex digits>") from None
        return QueryRequest("detail", topic, entity_id=entity_id)
    if method == "POST" and action == "query":
        page, page_size = _parse_page(doc)
        return QueryRequest(
            "conditional", topic, predicate=_parse_predicate(doc.get("predicate")),
            page=page, page_size=page_size,
        )
    if method == "POST" and action == "joint":
        page, page_size = _parse_page(doc)
        direction = doc.get("direction", "from")
        if direction not in ("from", "to"):
            raise QueryError(f"direction must be from|to, not {direction!r}")
        return QueryRequest(
            "joint", topic,
            predicate=_parse_predicate(doc.get("predicate")),
            relation=_parse_relation(doc.get("relation")),
            direction=direction,
            page=page, page_size=page_size,
        )
    if method == "POST" and action == "composed":
        page, page_size = _parse_page(doc)
        raw_steps = doc.get("steps")
        if not isinstance(raw_steps, list) or not raw_steps:
            raise QueryError("composed needs a non-empty steps list")
        if len(raw_steps) > MAX_COMPOSED_STEPS:
            raise QueryError(f"composed pipelines take at most {MAX_COMPOSED_STEPS} steps")
        steps = []
        for raw in raw_steps:
            if not isinstance(raw, dict):
                raise QueryError("each step needs relation and direction")
            direction = raw.get("direction", "from")
            if direction not in ("from", "to"):
                raise QueryError(f"direction must be from|to, not {direction!r}")
            steps.append((_parse_relation(raw.get("relation")), direction))
        return QueryRequest(
            "composed", topic,
            predicate=_parse_predicate(doc.get("seed_predicate")),
            steps=tuple(steps),
            page=page, page_size=page_size,
        )
    raise QueryError(f"no such endpoint {path!r}", code="not_found", status=404)


def execute(store: MetaStore, request: QueryRequest) -> dict:
    """Run one request against a store and build the response document."""
    started = time.perf_counter_ns()
    try:
        if request.kind == "browse":
            total, rows = store.browse(request.topic, request.page, request.page_size)
        elif request.kind == "detail":
            entity = store.get_entity(request.entity_id)
            if entity is None or entity.topic is not request.topic:
                raise QueryError("no such entity", code="not_found", status=404)
            total, rows = 1, [entity]
        elif request.kind == "conditional":
            total, rows = store.conditional(
                request.topic, request.predicate, request.page, request.page_size
            )
        elif request.kind == "joint":
            store.joint_signature(request.relation, request.direction)
            rows = store.joint(
                request.topic, request.predicate, request.relation, request.direction
            )
            total = len(rows)
            lo = request.page * request.page_size
            rows = rows[lo : lo + request.page_size]
        else:  # composed
            topic = request.topic
            for relation, direction in request.steps:
                anchor, result = store.joint_signature(relation, direction)
                if anchor is not topic:
                    raise RelationTopicMismatch(
                        f"step {relation.value}/{direction} anchors on {anchor.value}, "
                        f"pipeline is at {topic.value}"
                    )
                topic = result
            if request.page < 0 or not 1 <= request.page_size <= 1000:
                raise PageSizeOutOfRange("page >= 0 and page_size in [1, 1000] required")
            ids = store.match_ids(request.topic, request.predicate)
            for relation, direction in request.steps:
                ids = store.joint_ids(ids, relation, direction)
            rows = store.entities_by_ids(ids)
            total = len(rows)
            lo = request.page * request.page_size
            rows = rows[lo : lo + request.page_size]
    except PageSizeOutOfRange as exc:
        raise QueryError(str(exc), code="page_size_out_of_range") from exc
    except RelationTopicMismatch as exc:
        raise QueryError(str(exc), code="relation_topic_mismatch") from exc
    except pred_mod.TypeMismatch as exc:
        raise QueryError(str(exc), code="type_mismatch") from exc
    except pred_mod.UnknownField as exc:
        raise QueryError(str(exc), code="unknown_field") from exc
    except StoreClosed as exc:
        raise QueryError(str(exc), code="store_closed", status=503) from exc

    items = [entity_doc(e, store.entity_relations(e.id)) for e in rows]
    return {
        "total_count": total,
        "as_of_lsn": store.committed_lsn,
        "elapsed_us": (time.perf_counter_ns() - started) // 1000,
        "items": items,
    }


class QueryRouter:
    """Read routing: replica first when enabled, primary as fallback."""

    def __init__(self, primary, replica=None, read_from_replica: bool = False,
                 replication_client=None, role: str = "all"):
        self.primary = primary
        self.replica = replica
        self.read_from_replica = read_from_replica
        self.replication_client = replication_client
        self.role = role

    def reader(self):
        if self.read_from_replica and self.replica is not None:
            return self.replica
        return self.primary

    def execute(self, request: QueryRequest) -> dict:
        store = self.reader()
        try:
            return execute(store, request)
        except (TransportError, ConnectionClosed):
            if store is not self.primary:
                log.warning("replica read failed; falling back to primary")
                return execute(self.primary, request)
            raise

    def health(self) -> dict:
        doc = {"ok": True, "role": self.role, "lsn": self.primary.committed_lsn}
        if self.replica is not None:
            doc["replica_lsn"] = self.replica.committed_lsn
        if self.replication_client is not None:
            doc["replica_lag"] = self.replication_client.lag
        return doc


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "nstore"

    def log_message(self, fmt, *args):  # route through logging, not stderr prints
        log.debug("%s " + fmt, self.client_address[0], *args)

    def _respond(self, status: int, doc: dict) -> None:
        body = dumps_canonical(doc)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, status: int, code: str, message: str) -> None:
        self._respond(status, {"code": code, "message": message})

    def _body_doc(self) -> dict | None:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return None
        raw = self.rfile.read(length)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise QueryError(f"request body is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise QueryError("request body must be a JSON object")
        return doc

    def _handle(self, method: str) -> None:
        service: QueryService = self.server.service  # type: ignore[attr-defined]
        url = urlparse(self.path)
        if method == "GET" and url.path == "/v1/health":
            self._respond(200, service.router.health())
            return
        if not service.inflight.acquire(blocking=False):
            self._fail(503, "overloaded", "too many requests in flight")
            return
        try:
            if method == "GET":
                body = {k: v[0] for k, v in parse_qs(url.query).items()} or None
            else:
                body = self._body_doc()
            request = parse_request(method, url.path, body)
            self._respond(200, service.router.execute(request))
        except QueryError as exc:
            self._fail(exc.status, exc.code, str(exc))
        except (TransportError, ConnectionClosed) as exc:
            self._fail(503, "store_unreachable", str(exc))
        except Exception as exc:  # noqa: BLE001 - last-resort server error
            log.exception("request failed")
            self._fail(500, "internal", f"{type(exc).__name__}: {exc}")
        finally:
            service.inflight.release()

    def do_GET(self) -> None:
        self._handle("GET")

    def do_POST(self) -> None:
        self._handle("POST")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 1024


class QueryService:
    """Serving wrapper: bind, accept concurrently, drain on close."""

    def __init__(self, listen: str, router: QueryRouter,
                 timeout_ms: int = 30_000, max_inflight: int = 1024):
        from nstore.transport import parse_addr

        host, port = parse_addr(listen)
        self.router = router
        self.inflight = threading.Semaphore(max_inflight)
        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise QueryError(f"cannot bind {listen}: {exc}", code="bind_failure") from exc
        self._server.service = self  # type: ignore[attr-defined]
        self._server.timeout = timeout_ms / 1000.0
        _Handler.timeout = timeout_ms / 1000.0
        self.addr = f"{host}:{self._server.server_address[1]}"
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
            name="query-http", daemon=True,
        )
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=5)
        self._server.server_close()
