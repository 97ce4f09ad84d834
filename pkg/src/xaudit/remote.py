"""Decision queries over a local socket, one JSON object per line.

Request ``{"x": [..]}``, response ``{"score": s, "label": y}``. A malformed
request gets ``{"error": "..."}`` and the connection stays open.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np

from .models import DecisionFunction


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        f: DecisionFunction = self.server.model
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                x = np.asarray(json.loads(line)["x"], dtype=float)
                if x.shape != (f.d,):
                    raise ValueError(f"expected {f.d} features, got shape {list(x.shape)}")
                s = float(f.score(x))
                reply = {"score": s, "label": int(s >= f.threshold)}
            except (ValueError, KeyError, TypeError) as exc:
                reply = {"error": str(exc)}
            self.wfile.write((json.dumps(reply) + "\n").encode())
            self.wfile.flush()


class ProviderServer(socketserver.ThreadingTCPServer):
    """Serves ``model`` on ``host:port`` (port 0 picks a free one)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: DecisionFunction, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.model = model

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class RemoteDecisionFunction(DecisionFunction):
    """Client side: scores points by asking a provider process.

    ``d`` must be supplied since the wire protocol carries no schema.
    """

    kind = "remote"

    def __init__(self, address: str, d: int, threshold: float = 0.5, timeout: float = 30.0):
        super().__init__(d, threshold)
        host, _, port = address.rpartition(":")
        self.address = address
        self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self._io = threading.Lock()

    def _score(self, X):
        out = np.empty(X.shape[0])
        with self._io:
            for i, x in enumerate(X):
                self._file.write((json.dumps({"x": [float(v) for v in x]}) + "\n").encode())
                self._file.flush()
                reply = json.loads(self._file.readline())
                if "error" in reply:
                    raise RuntimeError(f"provider error: {reply['error']}")
                out[i] = reply["score"]
        return out

    def close(self):
        self._file.close()
        self._sock.close()

    def to_json(self):
        return {"address": self.address}
