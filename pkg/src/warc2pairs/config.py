"""Pipeline configuration: every numeric knob in one auditable place."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Raised when a config file fails validation; carries field-level messages."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class FilterConfig:
    """Image/text quality thresholds.

    min_unique_colors is 33 because the color gate requires strictly more
    than 32 distinct RGB triples; the name documents the strict inequality.
    """

    min_dim: int = 150
    aspect_min: float = 0.5
    aspect_max: float = 2.0
    min_unique_colors: int = 33
    nsfw_max: float = 0.1
    alignment_min: float = 0.1

    def validate(self) -> list[str]:
        problems = []
        if self.min_dim < 1:
            problems.append("filters.min_dim: must be >= 1")
        if self.aspect_min > self.aspect_max:
            problems.append("filters.aspect_min: must be <= filters.aspect_max")
        if self.aspect_min <= 0:
            problems.append("filters.aspect_min: must be > 0")
        if self.min_unique_colors < 1:
            problems.append("filters.min_unique_colors: must be >= 1")
        if not 0.0 <= self.nsfw_max <= 1.0:
            problems.append("filters.nsfw_max: must be in [0, 1]")
        if not -1.0 <= self.alignment_min <= 1.0:
            problems.append("filters.alignment_min: must be in [-1, 1]")
        return problems


@dataclass(frozen=True)
class BloomConfig:
    """Bloom filter sizing shared by all dedup stages.

    Defaults are sized for a single-snapshot run at the hundred-million
    scale with headroom; both values land in the manifest so runs are
    auditable.
    """

    capacity: int = 200_000_000
    target_fpr: float = 0.001
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.capacity < 1:
            problems.append("dedup.capacity: must be >= 1")
        if not 0.0 < self.target_fpr < 1.0:
            problems.append("dedup.target_fpr: must be in (0, 1)")
        return problems


@dataclass(frozen=True)
class FetchPolicy:
    """Politeness and resource limits for image downloading."""

    max_concurrency: int = 256
    per_host_concurrency: int = 2
    per_host_min_interval: float = 0.5  # seconds between request starts, per host
    timeout: float = 10.0
    max_bytes: int = 20 * 1024 * 1024
    retries: int = 1  # retried on connect errors only
    user_agent: str = "warc2pairs/0.1"
    obey_robots: bool = True
    max_redirects: int = 5

    def validate(self) -> list[str]:
        problems = []
        if self.max_concurrency < 1:
            problems.append("fetch.max_concurrency: must be >= 1")
        if self.per_host_concurrency < 1:
            problems.append("fetch.per_host_concurrency: must be >= 1")
        if self.per_host_min_interval < 0:
            problems.append("fetch.per_host_min_interval: must be >= 0")
        if self.timeout <= 0:
            problems.append("fetch.timeout: must be > 0")
        if self.max_bytes < 1:
            problems.append("fetch.max_bytes: must be >= 1")
        if self.retries < 0:
            problems.append("fetch.retries: must be >= 0")
        return problems


@dataclass
class PipelineConfig:
    """Full run configuration, one section per pipeline subsystem."""

    snapshot_id: str = "snapshot"
    warc_paths: list[str] = field(default_factory=list)
    warc_url_list: str | None = None
    max_record_bytes: int = 8 * 1024 * 1024
    target_lang: str = "ja"
    lang_min_confidence: float = 0.7
    max_caption_chars: int = 1024
    filters: FilterConfig = field(default_factory=FilterConfig)
    bloom: BloomConfig = field(default_factory=BloomConfig)
    fetch: FetchPolicy = field(default_factory=FetchPolicy)
    offline_root: str | None = None
    scorer_mode: str = "mock"  # mock | http | stdio
    scorer_endpoint: str | None = None
    scorer_max_batch: int = 64
    out_dir: str = "out"
    shard_size: int = 10_000

    def validate(self) -> list[str]:
        problems = []
        if not self.snapshot_id:
            problems.append("snapshot_id: must be non-empty")
        if not self.warc_paths and not self.warc_url_list:
            problems.append("warc.paths: at least one WARC path or a url_list is required")
        if self.max_record_bytes < 1024:
            problems.append("warc.max_record_bytes: must be >= 1024")
        if not 0.0 <= self.lang_min_confidence <= 1.0:
            problems.append("lang_min_confidence: must be in [0, 1]")
        if self.max_caption_chars < 1:
            problems.append("pairs.max_caption_chars: must be >= 1")
        if self.scorer_mode not in ("mock", "http", "stdio"):
            problems.append("scorer.mode: must be one of mock, http, stdio")
        if self.scorer_mode in ("http", "stdio") and not self.scorer_endpoint:
            problems.append("scorer.endpoint: required unless scorer.mode is mock")
        if self.scorer_max_batch < 1:
            problems.append("scorer.max_batch: must be >= 1")
        if self.shard_size < 1:
            problems.append("output.shard_size: must be >= 1")
        problems += self.filters.validate()
        problems += self.bloom.validate()
        problems += self.fetch.validate()
        return problems

    def fingerprint(self) -> str:
        """Digest of the filtering-relevant settings, stored in the manifest."""
        payload = {
            "filters": asdict(self.filters),
            "bloom": asdict(self.bloom),
            "target_lang": self.target_lang,
            "lang_min_confidence": self.lang_min_confidence,
            "max_caption_chars": self.max_caption_chars,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError([f"{name}: must be a mapping"])
    return value


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a YAML config file.

    Raises ConfigError listing every offending field, not just the first.
    """
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(["config root: must be a mapping"])

    warc = _section(data, "warc")
    pairs = _section(data, "pairs")
    filters = _section(data, "filters")
    dedup = _section(data, "dedup")
    fetch = _section(data, "fetch")
    scorer = _section(data, "scorer")
    output = _section(data, "output")

    try:
        cfg = PipelineConfig(
            snapshot_id=str(data.get("snapshot_id", "snapshot")),
            warc_paths=[str(p) for p in warc.get("paths", []) or []],
            warc_url_list=warc.get("url_list"),
            max_record_bytes=int(warc.get("max_record_bytes", 8 * 1024 * 1024)),
            target_lang=str(data.get("target_lang", "ja")),
            lang_min_confidence=float(data.get("lang_min_confidence", 0.7)),
            max_caption_chars=int(pairs.get("max_caption_chars", 1024)),
            filters=FilterConfig(
                min_dim=int(filters.get("min_dim", 150)),
                aspect_min=float(filters.get("aspect_min", 0.5)),
                aspect_max=float(filters.get("aspect_max", 2.0)),
                min_unique_colors=int(filters.get("min_unique_colors", 33)),
                nsfw_max=float(filters.get("nsfw_max", 0.1)),
                alignment_min=float(filters.get("alignment_min", 0.1)),
            ),
            bloom=BloomConfig(
                capacity=int(dedup.get("capacity", 200_000_000)),
                target_fpr=float(dedup.get("target_fpr", 0.001)),
                seed=int(dedup.get("seed", 0)),
            ),
            fetch=FetchPolicy(
                max_concurrency=int(fetch.get("max_concurrency", 256)),
                per_host_concurrency=int(fetch.get("per_host_concurrency", 2)),
                per_host_min_interval=float(fetch.get("per_host_min_interval", 0.5)),
                timeout=float(fetch.get("timeout", 10.0)),
                max_bytes=int(fetch.get("max_bytes", 20 * 1024 * 1024)),
                retries=int(fetch.get("retries", 1)),
                user_agent=str(fetch.get("user_agent", "warc2pairs/0.1")),
                obey_robots=bool(fetch.get("obey_robots", True)),
                max_redirects=int(fetch.get("max_redirects", 5)),
            ),
            offline_root=fetch.get("offline_root"),
            scorer_mode=str(scorer.get("mode", "mock")),
            scorer_endpoint=scorer.get("endpoint"),
            scorer_max_batch=int(scorer.get("max_batch", 64)),
            out_dir=str(output.get("dir", "out")),
            shard_size=int(output.get("shard_size", 10_000)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"config value error: {exc}"]) from exc

    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


REFERENCE_CONFIG = """\
# warc2pairs reference configuration. Every default is stated explicitly.
snapshot_id: "2025-18"
target_lang: ja
lang_min_confidence: 0.7

warc:
  paths: []            # local .warc / .warc.gz files
  url_list: null       # or: file with one WARC URL per line
  max_record_bytes: 8388608

pairs:
  max_caption_chars: 1024

dedup:
  capacity: 200000000
  target_fpr: 0.001
  seed: 0

fetch:
  offline_root: null   # serve image URLs from this directory instead of HTTP
  max_concurrency: 256
  per_host_concurrency: 2
  per_host_min_interval: 0.5
  timeout: 10.0
  max_bytes: 20971520
  retries: 1
  user_agent: "warc2pairs/0.1"
  obey_robots: true
  max_redirects: 5

filters:
  min_dim: 150
  aspect_min: 0.5
  aspect_max: 2.0
  min_unique_colors: 33   # strictly more than 32 unique colors required
  nsfw_max: 0.1           # drop when score exceeds this (boundary kept)
  alignment_min: 0.1      # drop when score is below this (boundary kept)

scorer:
  mode: mock           # mock | http | stdio
  endpoint: null       # http: base URL; stdio: command line to spawn
  max_batch: 64

output:
  dir: out
  shard_size: 10000
"""


def write_reference_config(path: str | Path) -> None:
    Path(path).write_text(REFERENCE_CONFIG, encoding="utf-8")
