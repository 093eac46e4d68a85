import io
import threading

import numpy as np
import pytest
from PIL import Image

from scoresidecar.server import ScoreService, SidecarConfig, make_http_server


def png_bytes(seed: int = 0, size: int = 24) -> bytes:
    rng = np.random.RandomState(seed)
    pixels = rng.randint(0, 256, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def service():
    return ScoreService(SidecarConfig(model_id="hashed", max_batch=8, dim=128))


@pytest.fixture
def http_sidecar(service):
    server = make_http_server(service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()
