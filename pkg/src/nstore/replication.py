"""WAL shipping between a primary store and read replicas.

The primary serves a subscription feed: a replica connects, says which
LSN it has, and receives ordered batches of raw WAL entries as control
frames, plus idle heartbeats carrying the primary's head LSN so lag is
observable. Catch-up is asynchronous; a replica is always internally
consistent as of its own LSN.
"""

from __future__ import annotations

import logging
import socket
import threading

from nstore import wal
from nstore.store import MetaStore
from nstore.transport import ConnectionClosed, FrameSocket, TransportError, connect, parse_addr

log = logging.getLogger("nstore.replication")

_BATCH = 256
_IDLE_WAIT_S = 0.2


class ReplicationServer:
    """Accepts replica subscriptions on behalf of a primary store."""

    def __init__(self, store: MetaStore, listen: str):
        self.store = store
        host, port = parse_addr(listen)
        self._sock = socket.create_server((host, port), backlog=16)
        self.addr = f"{host}:{self._sock.getsockname()[1]}"
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="repl-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        try:
            self._sock.settimeout(0.25)
        except OSError:  # closed before the thread got scheduled
            return
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(
                target=self._serve, args=(FrameSocket(conn), peer),
                name=f"repl-{peer}", daemon=True,
            )
            t.start()
            self._threads.append(t)

    def _serve(self, fs: FrameSocket, peer) -> None:
        try:
            hello = fs.recv_control(timeout=10.0)
            if hello is None or hello.get("op") != "subscribe":
                return
            lsn = int(hello.get("from_lsn", 0))
            log.info("replica %s subscribed from lsn %d", peer, lsn)
            while not self._stop.is_set():
                raws = self.store.wal_since(lsn, _BATCH)
                if not raws:
                    with self.store.commit_cond:
                        self.store.commit_cond.wait(_IDLE_WAIT_S)
                    raws = self.store.wal_since(lsn, _BATCH)
                fs.send_control(
                    {
                        "op": "wal",
                        "head_lsn": self.store.committed_lsn,
                        "entries": [r.hex() for r in raws],
                    }
                )
                lsn += len(raws)
        except (TransportError, OSError):
            pass
        finally:
            fs.close()

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        self._accept_thread.join(timeout=2)


class ReplicationClient:
    """Tails a primary's feed into a local replica store."""

    def __init__(self, replica: MetaStore, primary_addr: str, reconnect_delay_s: float = 0.5):
        self.replica = replica
        self.primary_addr = primary_addr
        self.reconnect_delay_s = reconnect_delay_s
        self.head_lsn = replica.committed_lsn
        self.fatal: Exception | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="repl-client", daemon=True)
        self._thread.start()

    @property
    def lag(self) -> int:
        return max(0, self.head_lsn - self.replica.committed_lsn)

    def _run(self) -> None:
        while not self._stop.is_set() and self.fatal is None:
            try:
                self._tail_once()
            except (TransportError, ConnectionClosed, OSError) as exc:
                log.warning("replication link lost (%s); reconnecting", exc)
                self._stop.wait(self.reconnect_delay_s)

    def _tail_once(self) -> None:
        fs = connect(self.primary_addr, timeout=5.0)
        try:
            fs.send_control({"op": "subscribe", "from_lsn": self.replica.committed_lsn})
            while not self._stop.is_set():
                doc = fs.recv_control(timeout=5.0)
                if doc is None:
                    raise ConnectionClosed("feed closed")
                if doc.get("op") != "wal":
                    raise TransportError(f"unexpected feed message {doc.get('op')!r}")
                self.head_lsn = int(doc.get("head_lsn", self.head_lsn))
                entries = [bytes.fromhex(h) for h in doc.get("entries", [])]
                if entries:
                    try:
                        self.replica.apply_wal(entries)
                    except (wal.LsnGap, wal.CrcMismatch) as exc:
                        # a broken feed must never half-apply silently
                        self.fatal = exc
                        log.error("replication halted: %s", exc)
                        return
        finally:
            fs.close()

    def wait_caught_up(self, lsn: int, timeout: float = 10.0) -> bool:
        deadline = threading.Event()
        import time

        end = time.monotonic() + timeout
        while time.monotonic() < end:
            if self.replica.committed_lsn >= lsn:
                return True
            if self.fatal is not None:
                return False
            deadline.wait(0.01)
        return self.replica.committed_lsn >= lsn

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
