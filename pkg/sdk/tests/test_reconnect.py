"""Sequence resume across injected disconnects.

A flaky TCP proxy sits between the Sender and the service and drops
the link at scripted points; the final on-disk stream must equal the
no-disconnect run byte for byte.
"""

import os
import socket
import struct
import threading
import time

import numpy as np
import pytest

from nstore_client import DataEntity, Sender


class FlakyProxy:
    """Forwards bytes both ways; kill() severs the current connection."""

    def __init__(self, upstream: str):
        host, _, port = upstream.rpartition(":")
        self.upstream = (host, int(port))
        self._listener = socket.create_server(("127.0.0.1", 0))
        self.addr = f"127.0.0.1:{self._listener.getsockname()[1]}"
        self._live: list[socket.socket] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def _accept_loop(self):
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                client, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                server = socket.create_connection(self.upstream, timeout=5)
            except OSError:
                client.close()
                continue
            self._live += [client, server]
            for a, b in ((client, server), (server, client)):
                threading.Thread(target=self._pump, args=(a, b), daemon=True).start()

    def _pump(self, src, dst):
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                dst.sendall(data)
        except OSError:
            pass
        for s in (src, dst):
            try:
                s.close()
            except OSError:
                pass

    def kill(self):
        live, self._live = self._live, []
        for s in live:
            try:
                s.close()
            except OSError:
                pass

    def close(self):
        self._stop.set()
        self.kill()
        self._listener.close()


def read_nsl_samples(path: str) -> tuple[bytes, list[int]]:
    """Concatenated sample bytes + chunk sequence list, per the
    published stream-log layout (40-byte chunk headers)."""
    samples = []
    seqs = []
    raw = open(path, "rb").read()
    pos = 0
    while pos + 40 <= len(raw):
        seq, _start = struct.unpack_from("<QQ", raw, pos + 16)
        ch, spc = struct.unpack_from("<HI", raw, pos + 32)
        body = ch * spc * 8
        samples.append(raw[pos + 40 : pos + 40 + body])
        seqs.append(seq)
        pos += 40 + body
    return b"".join(samples), seqs


def stream_everything(ingest: str, signal: np.ndarray, interrupt=None) -> str:
    run = DataEntity("resume-run").mount(
        "EEG", channels=signal.shape[1], sampling_rate=250.0
    )
    with Sender(ingest, frames_per_chunk=50, max_retries=8) as sender:
        sender.send_entity(run)
        for i in range(0, signal.shape[0], 50):
            sender.send_samples(run.id, signal[i : i + 50])
            if interrupt is not None:
                interrupt(i // 50)
        sender.end_stream(run.id)
    return run.id


def wait_for_file(path: str, want_bytes: int, timeout: float = 20.0) -> None:
    deadline = time.time() + timeout
    while time.time() < deadline:
        if os.path.exists(path) and os.path.getsize(path) >= want_bytes:
            return
        time.sleep(0.05)
    raise TimeoutError(path)


@pytest.mark.parametrize("kill_points", [(2,), (1, 5, 9), (0, 1, 2, 3)])
def test_disconnects_do_not_lose_or_duplicate_samples(service, kill_points):
    rng = np.random.default_rng(sum(kill_points) + 1)
    signal = rng.normal(size=(600, 6))

    # reference run without interference
    ref_id = stream_everything(service.ingest, signal)

    proxy = FlakyProxy(service.ingest)
    try:
        def interrupt(chunk_index):
            if chunk_index in kill_points:
                proxy.kill()

        flaky_id = stream_everything(proxy.addr, signal, interrupt)
    finally:
        proxy.close()

    want = 600 * 6 * 8 + 12 * 40  # samples plus chunk headers
    ref_path = os.path.join(service.data_dir, "streams", f"{ref_id}.nsl")
    flaky_path = os.path.join(service.data_dir, "streams", f"{flaky_id}.nsl")
    wait_for_file(ref_path, want)
    wait_for_file(flaky_path, want)

    ref_samples, ref_seqs = read_nsl_samples(ref_path)
    flaky_samples, flaky_seqs = read_nsl_samples(flaky_path)
    assert flaky_seqs == ref_seqs == list(range(12))
    assert flaky_samples == ref_samples == signal.astype("<f8").tobytes()
