"""Minimal keep-alive JSON client for the query API.

One instance per virtual user: a single persistent connection, a retry
after a stale keep-alive disconnect, JSON in and out.
"""

from __future__ import annotations

import http.client
import json

from nstore.model import dumps_canonical


class HttpError(Exception):
    pass


class JsonHttp:
    def __init__(self, addr: str, timeout: float = 30.0):
        host, _, port = addr.rpartition(":")
        self.host = host or addr
        self.port = int(port) if port else 80
        self.timeout = timeout
        self._conn: http.client.HTTPConnection | None = None

    def _connection(self) -> http.client.HTTPConnection:
        if self._conn is None:
            self._conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        return self._conn

    def request(self, method: str, path: str, doc: dict | None = None) -> tuple[int, dict]:
        body = dumps_canonical(doc) if doc is not None else None
        headers = {"Content-Type": "application/json"} if body else {}
        for attempt in (0, 1):
            conn = self._connection()
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                raw = resp.read()
                return resp.status, json.loads(raw.decode("utf-8")) if raw else {}
            except (http.client.HTTPException, ConnectionError, OSError) as exc:
                # stale keep-alive socket: reconnect once, then give up
                self.close()
                if attempt:
                    raise HttpError(f"{method} {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise HttpError(f"{method} {path}: non-JSON response") from exc
        raise AssertionError("unreachable")

    def get(self, path: str) -> tuple[int, dict]:
        return self.request("GET", path)

    def post(self, path: str, doc: dict) -> tuple[int, dict]:
        return self.request("POST", path, doc)

    def close(self) -> None:
        if self._conn is not None:
            try:
                self._conn.close()
            finally:
                self._conn = None
