from __future__ import annotations

import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

DATA_DIR = Path(__file__).parent / "data"


# --- deterministic image synthesis -------------------------------------------


def gradient_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Smooth low-frequency RGB content: gradients plus a few soft blobs."""
    rng = np.random.RandomState(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(-1, 1, 3)
        layer = a * xx + b * yy + c * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2)))
        for _ in range(3):
            cx, cy, s = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.3)
            layer += rng.uniform(-1, 1) * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s**2)))
        lo, hi = layer.min(), layer.max()
        layer = (layer - lo) / (hi - lo + 1e-9)
        channels.append((layer * 255).astype(np.uint8))
    return np.stack(channels, axis=-1)


def flat_image(width: int, height: int, color=(200, 30, 30)) -> np.ndarray:
    return np.tile(np.array(color, dtype=np.uint8), (height, width, 1))


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def make_png():
    def _make(width=200, height=200, seed=0):
        return png_bytes(gradient_image(width, height, seed))

    return _make


# --- instrumented HTTP server --------------------------------------------------


class InstrumentedServer:
    """Local HTTP host recording arrival times and live connection counts."""

    def __init__(self, responses: dict[str, tuple[int, str, bytes]] | None = None,
                 handler_delay: float = 0.0):
        self.responses = responses or {}
        self.handler_delay = handler_delay
        self.arrivals: list[tuple[str, float]] = []
        self.live = 0
        self.max_live = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                import time

                with outer._lock:
                    outer.live += 1
                    outer.max_live = max(outer.max_live, outer.live)
                    outer.arrivals.append((self.path, time.monotonic()))
                try:
                    if outer.handler_delay:
                        time.sleep(outer.handler_delay)
                    status, ctype, body = outer.responses.get(
                        self.path, (404, "text/plain", b"not found")
                    )
                    self.send_response(status)
                    self.send_header("Content-Type", ctype)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                finally:
                    with outer._lock:
                        outer.live -= 1

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self.server.server_address[1]
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def url(self, path: str) -> str:
        return self.base_url + path

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def http_server():
    servers = []

    def _make(responses=None, handler_delay=0.0) -> InstrumentedServer:
        server = InstrumentedServer(responses, handler_delay)
        servers.append(server)
        return server

    yield _make
    for server in servers:
        server.close()


# --- in-process sidecar protocol endpoint ---------------------------------------


class ProtocolServer:
    """Minimal HTTP endpoint speaking scoring protocol v1, backed by a handler
    function (request dict -> response dict)."""

    def __init__(self, handler):
        outer_handler = handler

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                reply = outer_handler(payload)
                body = json.dumps(reply).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self.server.server_address[1]
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def protocol_server():
    servers = []

    def _make(handler) -> ProtocolServer:
        server = ProtocolServer(handler)
        servers.append(server)
        return server

    yield _make
    for server in servers:
        server.close()
