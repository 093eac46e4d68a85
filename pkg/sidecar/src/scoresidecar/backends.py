"""Embedding and NSFW backends.

The default hashed-projection backend is fully deterministic and needs no
model downloads: images embed through a fixed seeded projection of a
coarse pixel grid, texts through signed character n-gram hashing. It is
protocol-complete stand-in machinery, not a quality scorer. The
transformers backend wraps a real multilingual image-text checkpoint when
one is available (model ids prefixed "hf:").
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np
from PIL import Image


class ImageDecodeError(ValueError):
    """Raised for undecodable image bytes; the server maps it to the
    per-item error sentinel instead of dropping the item."""


class HashedProjectionBackend:
    """Deterministic offline backend producing unit-norm embeddings."""

    name = "hashed-projection"

    def __init__(self, dim: int = 256, seed: int = 42):
        self.dim = dim
        rng = np.random.RandomState(seed)
        # fixed projection from an 8x8x3 pixel grid into embedding space
        self._image_proj = rng.randn(8 * 8 * 3, dim)
        self._nsfw_weights = rng.randn(8 * 8 * 3)

    # -- images ---------------------------------------------------------

    def _grid_features(self, data: bytes) -> np.ndarray:
        try:
            img = Image.open(io.BytesIO(data)).convert("RGB").resize((8, 8))
        except Exception as exc:
            raise ImageDecodeError(str(exc)) from exc
        grid = np.asarray(img, dtype=np.float64).reshape(-1) / 255.0
        return grid - grid.mean()

    def embed_image(self, data: bytes) -> np.ndarray:
        vec = self._grid_features(data) @ self._image_proj
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            # degenerate flat image: fall back to a digest-seeded direction
            vec = self._digest_direction(hashlib.sha256(data).digest())
            norm = np.linalg.norm(vec)
        return vec / norm

    def nsfw_score(self, data: bytes) -> float:
        features = self._grid_features(data)
        logit = float(features @ self._nsfw_weights)
        return 1.0 / (1.0 + np.exp(-logit))

    # -- text -----------------------------------------------------------

    def _digest_direction(self, digest: bytes) -> np.ndarray:
        rng = np.random.RandomState(struct.unpack("<I", digest[:4])[0])
        return rng.randn(self.dim)

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        padded = f"\x02{text}\x03"
        for n in (1, 2, 3):
            for i in range(len(padded) - n + 1):
                gram = padded[i : i + n].encode("utf-8")
                d = hashlib.blake2b(gram, digest_size=8, key=b"sidecar-text").digest()
                (h,) = struct.unpack("<Q", d)
                sign = 1.0 if h & 1 else -1.0
                vec[(h >> 1) % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            vec = self._digest_direction(hashlib.sha256(text.encode("utf-8")).digest())
            norm = np.linalg.norm(vec)
        return vec / norm


class TransformersBackend:
    """Real-model backend for multilingual image-text checkpoints.

    Loaded lazily so the sidecar starts without torch unless asked for.
    Inference runs in eval mode with gradients off, so repeated batches
    are deterministic on a given device.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        import torch
        from transformers import AutoModel, AutoProcessor

        self.name = model_id
        self._torch = torch
        self._device = device
        self._processor = AutoProcessor.from_pretrained(model_id)
        self._model = AutoModel.from_pretrained(model_id).to(device).eval()

    def embed_image(self, data: bytes) -> np.ndarray:
        try:
            img = Image.open(io.BytesIO(data)).convert("RGB")
        except Exception as exc:
            raise ImageDecodeError(str(exc)) from exc
        inputs = self._processor(images=img, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            features = self._model.get_image_features(**inputs)[0]
        vec = features.cpu().double().numpy()
        return vec / np.linalg.norm(vec)

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self._processor(
            text=[text], return_tensors="pt", padding=True, truncation=True
        ).to(self._device)
        with self._torch.no_grad():
            features = self._model.get_text_features(**inputs)[0]
        vec = features.cpu().double().numpy()
        return vec / np.linalg.norm(vec)

    def nsfw_score(self, data: bytes) -> float:
        # no bundled NSFW head for arbitrary checkpoints; report safe and
        # let deployments pair a dedicated classifier via compose_backends
        self.embed_image(data)
        return 0.0


def load_backend(model_id: str, device: str = "cpu", dim: int = 256):
    if model_id.startswith("hf:"):
        return TransformersBackend(model_id[3:], device=device)
    if model_id in ("hashed", "hashed-projection", "builtin"):
        return HashedProjectionBackend(dim=dim)
    raise ValueError(
        f"unknown model id {model_id!r}; use 'hashed' or 'hf:<checkpoint>'"
    )
