"""Node wiring: configuration, lifecycle, offline checks, CLI.

One process runs one role. ``all`` wires every component in-process;
the single-purpose roles talk to each other over the documented TCP
surfaces (ingest, admin, store RPC, replication feed, HTTP). Startup
always runs recovery (queue tails, stream tails, store WAL) before any
listener accepts traffic. Shutdown: stop ingest, drain the persist
consumers, flush the store, then stop the query service.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import struct
import sys
import threading

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from nstore import wal as wal_mod
from nstore import wire
from nstore.broker import AdminServer, Broker, IngestServer
from nstore.client import RemoteBroker
from nstore.model import RELATION_ENDPOINTS, RelationKind
from nstore.persist import PersistEngine, WorkerPool
from nstore.query import QueryRouter, QueryService
from nstore.replication import ReplicationClient, ReplicationServer
from nstore.store import MetaStore
from nstore.storerpc import RemoteStore, StoreServer

log = logging.getLogger("nstore.runtime")

ROLES = ("all", "broker", "persist", "store-primary", "store-replica", "query")

# section -> key -> (default, type, description)
CONFIG_SCHEMA: dict[str, dict[str, tuple]] = {
    "node": {
        "role": ("all", str, "one of " + "|".join(ROLES)),
    },
    "broker": {
        "partitions": (8, int, "fixed partition count"),
        "segment_bytes": (128 * 1024 * 1024, int, "segment roll size"),
        "disk_budget_bytes": (4 * 1024 * 1024 * 1024, int, "QueueFull threshold"),
        "fsync_interval_ms": (50, int, "background fsync cadence"),
        "listen": ("127.0.0.1:7070", str, "ingest frame listener"),
        "admin_listen": ("127.0.0.1:7071", str, "fetch/commit/stats listener"),
    },
    "persist": {
        "data_dir": ("./nstore-data", str, "node data directory"),
        "workers": (2, int, "persist worker count"),
        "reorder_window": (64, int, "per-stream reorder buffer, chunks"),
    },
    "store": {
        "snapshot_every_n_entries": (10_000, int, "snapshot cadence in WAL entries"),
        "listen": ("127.0.0.1:7090", str, "store RPC listener (store-* roles)"),
        "replica_listen": ("", str, "WAL feed listener on the primary; empty disables"),
        "primary_rpc": ("", str, "primary store RPC address (persist/query roles)"),
        "replica_rpc": ("", str, "replica store RPC address (query role reads)"),
        "primary_feed": ("", str, "primary WAL feed address (store-replica role)"),
        "read_from_replica": (False, bool, "route reads replica-first"),
    },
    "query": {
        "listen": ("127.0.0.1:7080", str, "HTTP query listener"),
        "timeout_ms": (30_000, int, "per-request timeout"),
        "max_inflight": (1024, int, "503 above this many concurrent requests"),
    },
    "bdf": {
        "pad_last_record": (True, bool, "zero-pad the trailing partial second"),
    },
}


class ConfigInvalid(Exception):
    pass


class Config:
    """Flat, validated view over the TOML file and environment."""

    def __init__(self, values: dict[str, object]):
        self._values = values

    def __getitem__(self, dotted: str):
        return self._values[dotted]

    @classmethod
    def defaults(cls) -> "Config":
        return cls(
            {f"{s}.{k}": spec[0] for s, keys in CONFIG_SCHEMA.items() for k, spec in keys.items()}
        )

    @classmethod
    def load(cls, path: str | None = None, overrides: dict[str, object] | None = None,
             env: dict[str, str] | None = None) -> "Config":
        values = {
            f"{s}.{k}": spec[0] for s, keys in CONFIG_SCHEMA.items() for k, spec in keys.items()
        }
        problems: list[str] = []
        if path is not None:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
            for section, keys in doc.items():
                if section not in CONFIG_SCHEMA:
                    problems.append(f"unknown section [{section}]")
                    continue
                if not isinstance(keys, dict):
                    problems.append(f"[{section}] must be a table")
                    continue
                for key, raw in keys.items():
                    if key not in CONFIG_SCHEMA[section]:
                        problems.append(f"unknown key {section}.{key}")
                        continue
                    values[f"{section}.{key}"] = raw
        env = os.environ if env is None else env
        for name, raw in env.items():
            if not name.startswith("NSTORE_"):
                continue
            parts = name[len("NSTORE_"):].lower().split("_", 1)
            if len(parts) != 2:
                problems.append(f"malformed environment override {name}")
                continue
            section, key = parts
            if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
                problems.append(f"unknown environment override {name}")
                continue
            values[f"{section}.{key}"] = raw
        for dotted, raw in (overrides or {}).items():
            if raw is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
                problems.append(f"unknown override {dotted}")
                continue
            values[dotted] = raw

        coerced: dict[str, object] = {}
        for section, keys in CONFIG_SCHEMA.items():
            for key, (default, typ, _doc) in keys.items():
                dotted = f"{section}.{key}"
                raw = values[dotted]
                try:
                    coerced[dotted] = _coerce(raw, typ)
                except ValueError as exc:
                    problems.append(f"{dotted}: {exc}")
        if coerced.get("node.role") not in ROLES:
            problems.append(f"node.role must be one of {'|'.join(ROLES)}")
        for key in ("broker.partitions", "persist.workers", "persist.reorder_window",
                    "store.snapshot_every_n_entries", "query.max_inflight"):
            if key in coerced and isinstance(coerced[key], int) and coerced[key] < 1:
                problems.append(f"{key} must be >= 1")
        if problems:
            raise ConfigInvalid("; ".join(problems))
        return cls(coerced)


def _coerce(raw, typ):
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false", "1", "0", "yes", "no"):
            return raw.lower() in ("true", "1", "yes")
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        if isinstance(raw, bool) or (not isinstance(raw, int) and not
                                     (isinstance(raw, str) and raw.lstrip("-").isdigit())):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw)
    if typ is str:
        if not isinstance(raw, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return raw
    raise AssertionError(typ)


class Node:
    """A running process: the components its role asks for, wired up."""

    def __init__(self, config: Config):
        self.config = config
        self.role = config["node.role"]
        self.data_dir = config["persist.data_dir"]
        os.makedirs(self.data_dir, exist_ok=True)

        self.broker = None
        self.ingest_server = None
        self.admin_server = None
        self.store = None
        self.replica = None
        self.store_server = None
        self.repl_server = None
        self.repl_client = None
        self.engine = None
        self.workers = None
        self.query_service = None
        self.remote_broker = None
        self.remote_store = None

        try:
            self._start()
        except Exception:
            self.shutdown()
            raise

    # -- builders ----------------------------------------------------------

    def _meta_dir(self) -> str:
        return os.path.join(self.data_dir, "meta")

    def _start_broker(self) -> None:
        cfg = self.config
        self.broker = Broker(
            self.data_dir,
            partitions=cfg["broker.partitions"],
            segment_bytes=cfg["broker.segment_bytes"],
            disk_budget_bytes=cfg["broker.disk_budget_bytes"],
            fsync_interval_ms=cfg["broker.fsync_interval_ms"],
        )
        self.admin_server = AdminServer(self.broker, cfg["broker.admin_listen"])

    def _open_ingest(self) -> None:
        self.ingest_server = IngestServer(self.broker, self.config["broker.listen"])

    def _start_store_primary(self, serve_rpc: bool) -> None:
        cfg = self.config
        self.store = MetaStore(self._meta_dir(), cfg["store.snapshot_every_n_entries"])
        if cfg["store.replica_listen"]:
            self.repl_server = ReplicationServer(self.store, cfg["store.replica_listen"])
        if serve_rpc:
            self.store_server = StoreServer(self.store, cfg["store.listen"])

    def _start(self) -> None:
        cfg = self.config
        role = self.role
        if role in ("all", "broker"):
            self._start_broker()
        if role == "all":
            self._start_store_primary(serve_rpc=False)
        elif role == "store-primary":
            self._start_store_primary(serve_rpc=True)
        elif role == "store-replica":
            if not cfg["store.primary_feed"]:
                raise ConfigInvalid("store-replica needs store.primary_feed")
            self.store = MetaStore(self._meta_dir(), cfg["store.snapshot_every_n_entries"])
            self.repl_client = ReplicationClient(self.store, cfg["store.primary_feed"])
            self.store_server = StoreServer(self.store, cfg["store.listen"])

        if role in ("all", "persist"):
            if role == "persist":
                if not cfg["store.primary_rpc"]:
                    raise ConfigInvalid("persist role needs store.primary_rpc")
                self.remote_store = RemoteStore(cfg["store.primary_rpc"])
                self.remote_broker = RemoteBroker(cfg["broker.admin_listen"])
                store, broker = self.remote_store, self.remote_broker
            else:
                store, broker = self.store, self.broker
            self.engine = PersistEngine(
                store, self.data_dir,
                reorder_window=cfg["persist.reorder_window"],
                default_sampling_rate=1000.0,
            )
            self.workers = WorkerPool(self.engine, broker, cfg["persist.workers"])

        if role in ("all", "query"):
            if role == "query":
                if not cfg["store.primary_rpc"]:
                    raise ConfigInvalid("query role needs store.primary_rpc")
                primary = RemoteStore(cfg["store.primary_rpc"])
                self.remote_store = primary
                replica = RemoteStore(cfg["store.replica_rpc"]) if cfg["store.replica_rpc"] else None
            else:
                primary, replica = self.store, self.replica
            router = QueryRouter(
                primary, replica,
                read_from_replica=cfg["store.read_from_replica"],
                replication_client=self.repl_client,
                role=role,
            )
            self.query_service = QueryService(
                cfg["query.listen"], router,
                timeout_ms=cfg["query.timeout_ms"],
                max_inflight=cfg["query.max_inflight"],
            )

        # ingest last: recovery is done, traffic may flow
        if role in ("all", "broker"):
            self._open_ingest()
        self._write_node_file()
        log.info("node role=%s data_dir=%s ready", role, self.data_dir)

    def _write_node_file(self) -> None:
        """Advertise the bound addresses (ephemeral ports included) so
        tooling can find a node started with :0 listeners."""
        import json

        doc = {"role": self.role, "pid": os.getpid()}
        for key, component in (
            ("ingest", self.ingest_server),
            ("admin", self.admin_server),
            ("query", self.query_service),
            ("store_rpc", self.store_server),
            ("replication", self.repl_server),
        ):
            if component is not None:
                doc[key] = component.addr
        path = os.path.join(self.data_dir, "node.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(doc, f, indent=1)
        os.replace(tmp, path)

    # -- lifecycle ---------------------------------------------------------

    def drain(self, timeout_s: float = 60.0) -> bool:
        if self.workers is None:
            return True
        return self.workers.drain(timeout_s)

    def shutdown(self, drain_timeout_s: float = 10.0) -> None:
        if self.ingest_server is not None:
            self.ingest_server.close()
            self.ingest_server = None
        if self.broker is not None:
            self.broker.begin_shutdown()
        if self.workers is not None:
            self.workers.drain(drain_timeout_s)
            self.workers.stop()
            self.workers = None
        if self.engine is not None:
            self.engine.flush()
            self.engine.close()
            self.engine = None
        if self.store is not None:
            self.store.flush()
        if self.query_service is not None:
            self.query_service.close()
            self.query_service = None
        for attr in ("repl_client", "repl_server", "store_server", "admin_server",
                     "remote_broker", "remote_store"):
            component = getattr(self, attr)
            if component is not None:
                component.close()
                setattr(self, attr, None)
        if self.broker is not None:
            self.broker.close()
            self.broker = None
        if self.store is not None:
            self.store.close()
            self.store = None
        log.info("node role=%s stopped", self.role)


def start(config: Config) -> Node:
    return Node(config)


# --- offline integrity audit ------------------------------------------------


class CheckReport:
    def __init__(self) -> None:
        self.issues: list[str] = []
        self.notes: list[str] = []
        self.stats: dict[str, int] = {}

    @property
    def ok(self) -> bool:
        return not self.issues

    def lines(self) -> list[str]:
        out = [f"{k}: {v}" for k, v in sorted(self.stats.items())]
        out.extend(f"note: {n}" for n in self.notes)
        out.extend(f"ISSUE: {i}" for i in self.issues)
        out.append("result: " + ("ok" if self.ok else "corrupt"))
        return out


def check(data_dir: str) -> CheckReport:
    """Read-only audit of queue segments, stream logs, and the store."""
    report = CheckReport()
    _check_queue(os.path.join(data_dir, "queue"), report)
    _check_streams(os.path.join(data_dir, "streams"), report)
    _check_store(os.path.join(data_dir, "meta"), report)
    quarantine = os.path.join(data_dir, "quarantine")
    if os.path.isdir(quarantine):
        names = os.listdir(quarantine)
        report.stats["quarantined_records"] = len(names)
        if names:
            report.notes.append(f"{len(names)} quarantined record(s) await inspection")
    return report


def _check_queue(queue_dir: str, report: CheckReport) -> None:
    if not os.path.isdir(queue_dir):
        report.stats["queue_records"] = 0
        return
    total = 0
    from nstore.broker import _BODY_HEAD, _LEN, _MAX_BODY  # shared framing
    from nstore.wire import crc32c

    for part in sorted(os.listdir(queue_dir)):
        pdir = os.path.join(queue_dir, part)
        if not part.startswith("p") or not os.path.isdir(pdir):
            continue
        expected = 0
        names = sorted(n for n in os.listdir(pdir) if n.endswith(".seg"))
        for i, name in enumerate(names):
            path = os.path.join(pdir, name)
            base = int(name[: -len(".seg")])
            if base != expected:
                report.issues.append(
                    f"queue {part}/{name}: starts at offset {base}, expected {expected}"
                )
                break
            with open(path, "rb") as f:
                data = f.read()
            pos = 0
            while len(data) - pos >= 4:
                (body_len,) = _LEN.unpack_from(data, pos)
                if body_len > _MAX_BODY or len(data) - pos < body_len + 8:
                    break
                body = data[pos + 4 : pos + 4 + body_len]
                (want,) = _LEN.unpack_from(data, pos + 4 + body_len)
                if crc32c(body) != want:
                    break
                offset = _BODY_HEAD.unpack_from(body, 0)[0]
                if offset != expected:
                    report.issues.append(
                        f"queue {part}/{name}: record offset {offset}, expected {expected}"
                    )
                    break
                try:
                    wire.decode_frame(body[_BODY_HEAD.size:])
                except wire.WireError as exc:
                    report.issues.append(f"queue {part}/offset {offset}: bad frame: {exc}")
                expected += 1
                total += 1
                pos += body_len + 8
            if pos < len(data):
                if i == len(names) - 1:
                    report.notes.append(
                        f"queue {part}: {len(data) - pos} torn tail byte(s), recoverable"
                    )
                else:
                    report.issues.append(f"queue {part}/{name}: corrupt record mid-segment")
                    break
    report.stats["queue_records"] = total


def _check_streams(streams_dir: str, report: CheckReport) -> None:
    if not os.path.isdir(streams_dir):
        report.stats["streams"] = 0
        return
    count = 0
    for name in sorted(os.listdir(streams_dir)):
        if not name.endswith(".nsl"):
            continue
        count += 1
        path = os.path.join(streams_dir, name)
        sid = bytes.fromhex(name[: -len(".nsl")])
        size = os.path.getsize(path)
        seq = 0
        samples = 0
        channels = None
        pos = 0
        with open(path, "rb") as f:
            while True:
                head = f.read(wire.CHUNK_HEADER_LEN)
                if len(head) < wire.CHUNK_HEADER_LEN:
                    break
                got_sid = head[:16]
                sequence, start_sample = struct.unpack_from("<QQ", head, 16)
                ch, spc = struct.unpack_from("<HI", head, 32)
                body = ch * spc * wire.SAMPLE_BYTES
                if got_sid != sid:
                    report.issues.append(f"stream {name}: chunk {seq} has foreign stream id")
                    break
                if sequence != seq or start_sample != samples:
                    report.issues.append(
                        f"stream {name}: chunk numbering breaks at sequence {sequence}"
                    )
                    break
                if channels is not None and ch != channels:
                    report.issues.append(f"stream {name}: channel count changes at {seq}")
                    break
                if f.tell() + body > size:
                    break  # torn tail
                channels = ch
                f.seek(body, os.SEEK_CUR)
                seq += 1
                samples += spc
                pos = f.tell()
        if pos < size:
            report.notes.append(f"stream {name}: {size - pos} torn tail byte(s), recoverable")
    report.stats["streams"] = count


def _check_store(meta_dir: str, report: CheckReport) -> None:
    wal_path = os.path.join(meta_dir, "wal.log")
    if not os.path.exists(wal_path):
        report.stats["store_entities"] = 0
        return
    try:
        entries, valid, raws = wal_mod.scan(wal_path)
    except wal_mod.LsnGap as exc:
        report.issues.append(f"store wal: {exc}")
        return
    size = os.path.getsize(wal_path)
    if valid < size:
        report.notes.append(f"store wal: {size - valid} torn tail byte(s), recoverable")
    shadow = MetaStore(None)
    try:
        try:
            shadow.apply_wal(raws)
        except wal_mod.WalError as exc:
            report.issues.append(f"store wal replay: {exc}")
            return
        report.stats["store_entities"] = shadow.entity_count()
        report.stats["store_lsn"] = shadow.committed_lsn
        # referenced entities exist with signature-consistent topics
        for (kind, from_id, to_id), _rel in shadow._relations.items():
            from_e = shadow.get_entity(from_id)
            to_e = shadow.get_entity(to_id)
            if from_e is None or to_e is None:
                report.issues.append(
                    f"store: relation {kind.value} references a missing entity"
                )
                continue
            want_from, want_to = RELATION_ENDPOINTS[kind]
            if from_e.topic is not want_from or to_e.topic is not want_to:
                report.issues.append(
                    f"store: relation {kind.value} joins "
                    f"{from_e.topic.value}->{to_e.topic.value}"
                )
        # the process graph stays a forest
        parent: dict[bytes, bytes] = {}
        for (kind, from_id, to_id) in shadow._relations:
            if kind is RelationKind.PROCESS_PARENT:
                if from_id in parent:
                    report.issues.append("store: a process has two parents")
                parent[from_id] = to_id
        for start in parent:
            seen = {start}
            node = parent.get(start)
            while node is not None:
                if node in seen:
                    report.issues.append("store: process parent cycle detected")
                    break
                seen.add(node)
                node = parent.get(node)
    finally:
        shadow.close()


# --- CLI ---------------------------------------------------------------


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


def _cmd_serve(args) -> int:
    overrides = {"node.role": args.role, "persist.data_dir": args.data_dir}
    try:
        config = Config.load(args.config, overrides)
    except (ConfigInvalid, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    node = start(config)
    stop = threading.Event()

    def handler(signum, _frame):
        log.info("signal %d received; shutting down", signum)
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        node.shutdown()
    return 0


def _cmd_export_bdf(args) -> int:
    from nstore.bdf import export_bdf
    from nstore.persist import PersistError, SignalLog

    streams_dir = os.path.join(args.data_dir, "streams")
    try:
        stream_id = bytes.fromhex(args.stream)
        if len(stream_id) != 16:
            raise ValueError
    except ValueError:
        print(f"--stream must be 32 hex digits, got {args.stream!r}", file=sys.stderr)
        return 2
    if not os.path.exists(os.path.join(streams_dir, f"{args.stream}.nsl")):
        print(f"no stream {args.stream} under {streams_dir}", file=sys.stderr)
        return 1
    slog = SignalLog(streams_dir, stream_id)
    try:
        summary = export_bdf(slog, args.out, pad_last_record=not args.no_pad)
    except PersistError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    finally:
        slog.close()
    print(
        f"wrote {summary.path}: {summary.records} records x {summary.channels} ch "
        f"x {summary.samples_per_record} samples, {summary.file_bytes} bytes"
    )
    return 0


def _cmd_check(args) -> int:
    report = check(args.data_dir)
    for line in report.lines():
        print(line)
    return 0 if report.ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="nstore", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a node")
    serve.add_argument("--config", help="TOML config file")
    serve.add_argument("--role", choices=ROLES, help="override node.role")
    serve.add_argument("--data-dir", help="override persist.data_dir")

    export = sub.add_parser("export-bdf", help="export a finalized stream to BDF")
    export.add_argument("--data-dir", required=True)
    export.add_argument("--stream", required=True, help="stream id, 32 hex digits")
    export.add_argument("--out", required=True)
    export.add_argument("--no-pad", action="store_true",
                        help="drop the trailing partial second instead of padding")

    chk = sub.add_parser("check", help="offline integrity audit of a data dir")
    chk.add_argument("--data-dir", required=True)

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "export-bdf":
        return _cmd_export_bdf(args)
    return _cmd_check(args)


if __name__ == "__main__":
    sys.exit(main())
