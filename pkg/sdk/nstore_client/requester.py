"""Query requester: typed access to the HTTP read API.

Stateless between calls apart from connection reuse; safe to share
across threads is NOT promised — use one Requester per thread. Query
functions mirror the service: browse, detail, conditional, joint, and
composed pipelines, each returning parsed entity documents.

Predicates are plain dicts; the helpers at the bottom build them:

    from nstore_client import requester as q
    pred = q.and_(q.ge("EEG.channels", 64), q.contains("name", "run"))
"""

from __future__ import annotations

import http.client
import json

from nstore_client.documents import RELATIONS, TOPICS, dumps_canonical
from nstore_client.errors import ProtocolError, RequestFailed, ValidationError, request_error


class Requester:
    def __init__(self, base_addr: str, timeout: float = 30.0, page_size: int = 50):
        host, _, port = base_addr.rpartition(":")
        if not host or not port.isdigit():
            raise ValidationError(f"service address must be host:port, got {base_addr!r}")
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self.page_size = page_size
        self._conn: http.client.HTTPConnection | None = None

    # -- plumbing ----------------------------------------------------------

    def _request(self, method: str, path: str, doc: dict | None = None) -> dict:
        body = dumps_canonical(doc) if doc is not None else None
        headers = {"Content-Type": "application/json"} if body else {}
        for attempt in (0, 1):
            if self._conn is None:
                self._conn = http.client.HTTPConnection(
                    self.host, self.port, timeout=self.timeout
                )
            try:
                self._conn.request(method, path, body=body, headers=headers)
                resp = self._conn.getresponse()
                raw = resp.read()
                break
            except (http.client.HTTPException, OSError) as exc:
                self.close()
                if attempt:
                    raise RequestFailed(0, "unreachable", str(exc)) from exc
        try:
            payload = json.loads(raw.decode("utf-8")) if raw else {}
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"non-JSON response from {path}") from exc
        if resp.status != 200:
            raise request_error(resp.status, payload.get("code", "error"),
                                payload.get("message", ""))
        return payload

    @staticmethod
    def _check_topic(topic: str) -> str:
        if topic not in TOPICS:
            raise ValidationError(f"unknown topic {topic!r}; one of {TOPICS}")
        return topic

    @staticmethod
    def _check_relation(relation: str, direction: str) -> None:
        if relation not in RELATIONS:
            raise ValidationError(f"unknown relation {relation!r}")
        if direction not in ("from", "to"):
            raise ValidationError("direction must be 'from' or 'to'")

    # -- queries -----------------------------------------------------------

    def health(self) -> dict:
        return self._request("GET", "/v1/health")

    def browse(self, topic: str, page: int = 0, page_size: int | None = None) -> dict:
        self._check_topic(topic)
        size = self.page_size if page_size is None else page_size
        return self._request("GET", f"/v1/{topic}/browse?page={page}&page_size={size}")

    def detail(self, topic: str, entity_id: str) -> dict:
        self._check_topic(topic)
        doc = self._request("GET", f"/v1/{topic}/detail?id={entity_id}")
        return doc["items"][0]

    def conditional(self, topic: str, predicate: dict | None,
                    page: int = 0, page_size: int | None = None) -> dict:
        self._check_topic(topic)
        return self._request("POST", f"/v1/{topic}/query", {
            "predicate": predicate,
            "page": page,
            "page_size": self.page_size if page_size is None else page_size,
        })

    def joint(self, anchor_topic: str, relation: str, direction: str = "from",
              predicate: dict | None = None, page: int = 0,
              page_size: int | None = None) -> dict:
        self._check_topic(anchor_topic)
        self._check_relation(relation, direction)
        return self._request("POST", f"/v1/{anchor_topic}/joint", {
            "predicate": predicate,
            "relation": relation,
            "direction": direction,
            "page": page,
            "page_size": self.page_size if page_size is None else page_size,
        })

    def composed(self, seed_topic: str, steps: list[tuple[str, str]],
                 seed_predicate: dict | None = None, page: int = 0,
                 page_size: int | None = None) -> dict:
        """Pipeline of up to four joint hops seeded by a conditional."""
        self._check_topic(seed_topic)
        for relation, direction in steps:
            self._check_relation(relation, direction)
        return self._request("POST", f"/v1/{seed_topic}/composed", {
            "seed_predicate": seed_predicate,
            "steps": [{"relation": r, "direction": d} for r, d in steps],
            "page": page,
            "page_size": self.page_size if page_size is None else page_size,
        })

    def close(self) -> None:
        if self._conn is not None:
            try:
                self._conn.close()
            finally:
                self._conn = None

    def __enter__(self) -> "Requester":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- predicate builders ------------------------------------------------


def _leaf(field: str, op: str, value) -> dict:
    return {"field": field, "op": op, "value": value}


def eq(field, value):
    return _leaf(field, "eq", value)


def neq(field, value):
    return _leaf(field, "neq", value)


def lt(field, value):
    return _leaf(field, "lt", value)


def le(field, value):
    return _leaf(field, "le", value)


def gt(field, value):
    return _leaf(field, "gt", value)


def ge(field, value):
    return _leaf(field, "ge", value)


def contains(field, value):
    return _leaf(field, "contains", value)


def one_of(field, values):
    return _leaf(field, "in", list(values))


def and_(*predicates):
    return {"and": list(predicates)}


def or_(*predicates):
    return {"or": list(predicates)}


def not_(predicate):
    return {"not": predicate}
