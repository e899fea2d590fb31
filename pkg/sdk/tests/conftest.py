"""Fixtures that run a real service process for end-to-end tests.

The SDK only touches the service's external surfaces: the `nstore`
CLI to start it, the published node.json for the bound ports, the
ingest TCP port, and the HTTP query API.
"""

import json
import os
import shutil
import signal
import subprocess
import sys
import time

import pytest


class ServiceProcess:
    def __init__(self, tmp_dir: str):
        self.data_dir = os.path.join(tmp_dir, "data")
        os.makedirs(self.data_dir, exist_ok=True)
        config = os.path.join(tmp_dir, "node.toml")
        with open(config, "w") as f:
            f.write("\n".join([
                "[persist]",
                f'data_dir = "{self.data_dir}"',
                "workers = 2",
                "[broker]",
                "partitions = 4",
                'listen = "127.0.0.1:0"',
                'admin_listen = "127.0.0.1:0"',
                "[query]",
                'listen = "127.0.0.1:0"',
            ]))
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "nstore", "serve", "--config", config],
            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
        )
        node_file = os.path.join(self.data_dir, "node.json")
        deadline = time.time() + 20
        self.addrs = None
        while time.time() < deadline:
            if os.path.exists(node_file):
                try:
                    doc = json.load(open(node_file))
                    if "ingest" in doc and "query" in doc:
                        self.addrs = doc
                        break
                except (ValueError, OSError):
                    pass
            if self.proc.poll() is not None:
                raise RuntimeError(
                    "service died during startup:\n" + self.proc.stderr.read().decode()
                )
            time.sleep(0.02)
        if self.addrs is None:
            self.proc.kill()
            raise RuntimeError("service never became ready")

    @property
    def ingest(self) -> str:
        return self.addrs["ingest"]

    @property
    def query(self) -> str:
        return self.addrs["query"]

    def export_bdf(self, stream_id: str, out_path: str, timeout: float = 30.0) -> None:
        """Poll the export CLI until the stream is finalized on disk."""
        deadline = time.time() + timeout
        while True:
            result = subprocess.run(
                [sys.executable, "-m", "nstore", "export-bdf",
                 "--data-dir", self.data_dir, "--stream", stream_id, "--out", out_path],
                capture_output=True,
            )
            if result.returncode == 0:
                return
            if time.time() > deadline:
                raise TimeoutError(
                    f"export never succeeded: {result.stderr.decode().strip()}"
                )
            time.sleep(0.1)

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                self.proc.kill()


@pytest.fixture()
def service(tmp_path):
    svc = ServiceProcess(str(tmp_path))
    yield svc
    svc.stop()
