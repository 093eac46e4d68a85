"""Protocol v1 server core plus stdio and HTTP front ends.

request:   {"batch_id": str, "items": [{"image_b64": str, "caption": str}]}
response:  {"batch_id": str, "scores": [{"nsfw": num, "align": num}]}
handshake: {"op": "hello"} -> {"proto": 1, "max_batch": int, "model": str}

An undecodable image yields the per-item sentinel {"nsfw": 1.0,
"align": -1.0, "error": true}; items are never dropped, so |scores| always
equals |items| and index alignment survives bad inputs.
"""

from __future__ import annotations

import base64
import json
import sys
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .backends import ImageDecodeError, load_backend

PROTO_VERSION = 1
ERROR_SENTINEL = {"nsfw": 1.0, "align": -1.0, "error": True}


@dataclass
class SidecarConfig:
    model_id: str = "hashed"
    device: str = "cpu"
    max_batch: int = 64
    dim: int = 256

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


class ScoreService:
    """Backend-agnostic request handler; one instance serves all transports."""

    def __init__(self, config: SidecarConfig, backend=None):
        self.config = config
        self.backend = backend or load_backend(
            config.model_id, device=config.device, dim=config.dim
        )
        self._lock = threading.Lock()

    def hello(self) -> dict:
        return {
            "proto": PROTO_VERSION,
            "max_batch": self.config.max_batch,
            "model": getattr(self.backend, "name", self.config.model_id),
        }

    def score_item(self, item: dict) -> dict:
        caption = item.get("caption", "")
        try:
            image = base64.b64decode(item.get("image_b64", ""), validate=True)
        except Exception:
            return dict(ERROR_SENTINEL)
        try:
            image_vec = self.backend.embed_image(image)
            nsfw = float(self.backend.nsfw_score(image))
        except ImageDecodeError:
            return dict(ERROR_SENTINEL)
        text_vec = self.backend.embed_text(caption)
        align = float(np.dot(image_vec, text_vec))
        return {"nsfw": nsfw, "align": align}

    def handle(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            return {"error": "request must be a JSON object"}
        if payload.get("op") == "hello":
            return self.hello()
        batch_id = payload.get("batch_id")
        items = payload.get("items")
        if batch_id is None or not isinstance(items, list):
            return {"error": "request needs batch_id and items", "batch_id": batch_id}
        if len(items) > self.config.max_batch:
            return {
                "error": f"batch of {len(items)} exceeds max_batch {self.config.max_batch}",
                "batch_id": batch_id,
            }
        with self._lock:  # single batch at a time; run more instances to scale
            scores = [self.score_item(item) for item in items]
        return {"batch_id": batch_id, "scores": scores}


def serve_stdio(service: ScoreService, stdin=None, stdout=None) -> None:
    """Line-delimited protocol loop; EOF on stdin ends the process."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            reply = {"error": "malformed JSON line"}
        else:
            reply = service.handle(payload)
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: ScoreService = None  # set by make_http_server

    def do_POST(self):
        if self.path.rstrip("/") not in ("", "/score"):
            self._reply(404, {"error": f"no such endpoint {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError):
            self._reply(400, {"error": "malformed JSON body"})
            return
        self._reply(200, self.service.handle(payload))

    def _reply(self, status: int, obj: dict):
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def make_http_server(service: ScoreService, host: str = "127.0.0.1", port: int = 0):
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_http(service: ScoreService, host: str, port: int) -> None:
    server = make_http_server(service, host, port)
    print(f"scoresidecar listening on http://{host}:{server.server_address[1]}/score",
          file=sys.stderr)
    server.serve_forever()
