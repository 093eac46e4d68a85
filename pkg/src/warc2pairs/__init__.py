"""warc2pairs: WARC snapshots -> deduplicated, filtered image-text pairs."""

__version__ = "0.1.0"

from .config import BloomConfig, FetchPolicy, FilterConfig, PipelineConfig
from .pairs import PairCandidate

__all__ = [
    "BloomConfig",
    "FetchPolicy",
    "FilterConfig",
    "PairCandidate",
    "PipelineConfig",
    "__version__",
]
