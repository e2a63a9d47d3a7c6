"""Vulnerability retrieval: top-N most recent CVE records per keyword.

Two interchangeable sources share one record type: a live NVD REST client
and an offline fixture directory for deterministic tests. Results can be
cached on disk keyed by (keyword, limit, source), with atomic writes.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path

import requests

from .errors import MalformedResponseError, NetworkError, RateLimitError, SchemaError

logger = logging.getLogger(__name__)

_CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")

NVD_API_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"


class Severity(Enum):
    NONE = "None"
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"
    CRITICAL = "Critical"

    @classmethod
    def from_str(cls, value: str) -> "Severity":
        for member in cls:
            if member.value.lower() == value.strip().lower():
                return member
        raise SchemaError(f"unknown severity {value!r}")


@dataclass(frozen=True)
class CveRecord:
    cve_id: str
    cna: str
    description: str
    published: date
    severity: Severity | None = None
    patched: bool | None = None
    source_url: str = ""

    def __post_init__(self):
        if not _CVE_ID_RE.match(self.cve_id):
            raise SchemaError(f"malformed CVE id {self.cve_id!r}")
        if not self.description:
            raise SchemaError(f"{self.cve_id}: empty description")

    def numeric_id(self) -> tuple[int, int]:
        _, year, seq = self.cve_id.split("-")
        return (int(year), int(seq))


@dataclass(frozen=True)
class CveQuery:
    keyword: str
    limit: int = 10

    def __post_init__(self):
        if not self.keyword:
            raise ValueError("keyword must be non-empty")
        if self.limit < 1:
            raise ValueError("limit must be >= 1")


def record_to_dict(r: CveRecord) -> dict:
    return {
        "cve_id": r.cve_id,
        "cna": r.cna,
        "description": r.description,
        "published": r.published.isoformat(),
        "severity": r.severity.value if r.severity else None,
        "patched": r.patched,
        "source_url": r.source_url,
    }


def record_from_dict(data: dict) -> CveRecord:
    severity = data.get("severity")
    return CveRecord(
        cve_id=data["cve_id"],
        cna=data.get("cna", ""),
        description=data["description"],
        published=date.fromisoformat(data["published"]),
        severity=Severity.from_str(severity) if severity else None,
        patched=data.get("patched"),
        source_url=data.get("source_url", ""),
    )


# --- Sources -----------------------------------------------------------------

def keyword_slug(keyword: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", keyword.lower()).strip("_")
    return slug or "keyword"


class FixtureCveSource:
    """Reads per-keyword JSON record arrays from a directory.

    A missing file means the keyword simply has no known CVEs.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.name = f"fixture:{self.directory.name}"

    def search(self, keyword: str) -> list[CveRecord]:
        path = self.directory / f"{keyword_slug(keyword)}.json"
        if not path.exists():
            return []
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"{path}: {exc}", payload_excerpt=str(exc)) from exc
        return [record_from_dict(item) for item in data]


class TokenBucket:
    """Thread-safe token bucket; acquire() blocks until a token is free."""

    def __init__(self, rate_per_sec: float, capacity: int | None = None):
        self.rate = float(rate_per_sec)
        self.capacity = float(capacity if capacity is not None else max(1, int(rate_per_sec)))
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class NvdCveSource:
    """Keyword search against the NVD CVE REST API (v2 JSON).

    The API cannot sort by publication date, so the full first page (up to
    ``page_size`` records) is fetched and sorted locally by the caller.
    """

    def __init__(
        self,
        api_key_env: str = "NVD_API_KEY",
        page_size: int = 2000,
        retries: int = 3,
        backoff_base: float = 1.0,
        rate_limiter: TokenBucket | None = None,
        timeout: float = 30.0,
        url: str = NVD_API_URL,
    ):
        self.api_key_env = api_key_env
        self.page_size = page_size
        self.retries = retries
        self.backoff_base = backoff_base
        self.rate_limiter = rate_limiter
        self.timeout = timeout
        self.url = url
        self.name = "nvd"

    def search(self, keyword: str) -> list[CveRecord]:
        params = {"keywordSearch": keyword, "resultsPerPage": self.page_size}
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["apiKey"] = api_key

        last_error: Exception | None = None
        for attempt in range(1, self.retries + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                resp = requests.get(self.url, params=params, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = NetworkError(f"NVD request failed: {exc}")
            else:
                if resp.status_code in (403, 429):
                    retry_after = resp.headers.get("Retry-After")
                    raise RateLimitError(
                        f"NVD rate limit ({resp.status_code})",
                        retry_after=float(retry_after) if retry_after else None,
                    )
                if resp.status_code >= 500:
                    last_error = NetworkError(f"NVD server error {resp.status_code}")
                elif resp.status_code != 200:
                    raise MalformedResponseError(
                        f"NVD unexpected status {resp.status_code}",
                        payload_excerpt=resp.text[:400],
                    )
                else:
                    return self._parse(resp.text)
            if attempt < self.retries:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
        assert last_error is not None
        raise last_error

    def _parse(self, payload: str) -> list[CveRecord]:
        try:
            data = json.loads(payload)
            items = data["vulnerabilities"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedResponseError(
                f"unparseable NVD payload: {exc}", payload_excerpt=payload[:400]
            ) from exc

        records = []
        for item in items:
            cve = item.get("cve", {})
            cve_id = cve.get("id", "")
            descriptions = cve.get("descriptions", [])
            description = next(
                (d.get("value", "") for d in descriptions if d.get("lang") == "en"),
                descriptions[0].get("value", "") if descriptions else "",
            )
            published = cve.get("published", "")[:10]
            severity = _nvd_severity(cve.get("metrics", {}))
            try:
                records.append(CveRecord(
                    cve_id=cve_id,
                    cna=cve.get("sourceIdentifier", ""),
                    description=description,
                    published=date.fromisoformat(published),
                    severity=severity,
                    patched=None,
                    source_url=f"https://nvd.nist.gov/vuln/detail/{cve_id}",
                ))
            except (SchemaError, ValueError):
                logger.warning("skipping malformed NVD record %r", cve_id)
        return records


def _nvd_severity(metrics: dict) -> Severity | None:
    for key in ("cvssMetricV40", "cvssMetricV31", "cvssMetricV30", "cvssMetricV2"):
        entries = metrics.get(key)
        if entries:
            raw = entries[0].get("cvssData", {}).get("baseSeverity") or entries[0].get("baseSeverity")
            if raw:
                try:
                    return Severity.from_str(raw)
                except SchemaError:
                    return None
    return None


# --- Cache -------------------------------------------------------------------

class CveCache:
    """One JSON file per (keyword, limit, source) with the fetch timestamp."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, keyword: str, limit: int, source_name: str) -> Path:
        return self.directory / f"{keyword_slug(keyword)}__{limit}__{keyword_slug(source_name)}.json"

    def load(self, keyword: str, limit: int, source_name: str,
             max_age: float | None = None) -> list[CveRecord] | None:
        path = self._path(keyword, limit, source_name)
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        if max_age is not None and time.time() - entry["fetched_at"] > max_age:
            return None
        return [record_from_dict(item) for item in entry["records"]]

    def store(self, keyword: str, limit: int, source_name: str,
              records: list[CveRecord]) -> None:
        entry = {
            "keyword": keyword,
            "limit": limit,
            "source": source_name,
            "fetched_at": time.time(),
            "records": [record_to_dict(r) for r in records],
        }
        path = self._path(keyword, limit, source_name)
        # Atomic: write to a temp file in the same directory, then rename.
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(entry, handle, indent=2)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def clear(self) -> int:
        count = 0
        for path in self.directory.glob("*.json"):
            path.unlink()
            count += 1
        return count


# --- Retrieval ---------------------------------------------------------------

def recency_sort_key(record: CveRecord) -> tuple:
    """Most recent first: publication date, then numeric CVE id, descending."""
    year, seq = record.numeric_id()
    return (record.published.toordinal(), year, seq)


def fetch_recent(
    q: CveQuery,
    source,
    cache: CveCache | None = None,
    max_cache_age: float | None = None,
) -> list[CveRecord]:
    """Return the ``q.limit`` most recent records matching ``q.keyword``.

    Records come back sorted by publication date descending, ties broken by
    CVE id descending (numeric year/sequence order). With a cache attached,
    a repeat query is served from disk without touching the source.
    """
    if cache is not None:
        cached = cache.load(q.keyword, q.limit, source.name, max_age=max_cache_age)
        if cached is not None:
            return cached

    records = source.search(q.keyword)
    records = sorted(records, key=recency_sort_key, reverse=True)[: q.limit]

    if cache is not None:
        cache.store(q.keyword, q.limit, source.name, records)
    return records
