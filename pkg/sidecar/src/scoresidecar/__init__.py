"""Reference scoring sidecar for the image-text curation pipeline."""

__version__ = "0.1.0"

from .server import ScoreService, SidecarConfig

__all__ = ["ScoreService", "SidecarConfig", "__version__"]
