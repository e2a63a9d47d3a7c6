"""CVE record handling, top-N retrieval, caching and the NVD client."""

from __future__ import annotations

import json
import re
from datetime import date

import pytest

import medfdi.cve_client as cve_client
from medfdi.cve_client import (
    CveCache,
    CveQuery,
    CveRecord,
    FixtureCveSource,
    NvdCveSource,
    Severity,
    TokenBucket,
    fetch_recent,
    keyword_slug,
    record_from_dict,
    record_to_dict,
)
from medfdi.errors import MalformedResponseError, NetworkError, RateLimitError, SchemaError

from conftest import FIXTURES


def rec(cve_id: str, published: str, keyword: str = "thing") -> CveRecord:
    return CveRecord(
        cve_id=cve_id,
        cna="MITRE",
        description=f"flaw in {keyword}",
        published=date.fromisoformat(published),
    )


class CountingSource:
    """Wraps another source and counts search() calls."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.calls = 0

    def search(self, keyword):
        self.calls += 1
        return self.inner.search(keyword)


class TestRecordTypes:
    def test_malformed_id_rejected(self):
        with pytest.raises(SchemaError, match="malformed CVE id"):
            rec("CVE-25-1", "2025-01-01")

    def test_empty_description_rejected(self):
        with pytest.raises(SchemaError, match="empty description"):
            CveRecord(cve_id="CVE-2025-1234", cna="x", description="",
                      published=date(2025, 1, 1))

    def test_query_validation(self):
        assert CveQuery("Wi-Fi").limit == 10
        with pytest.raises(ValueError):
            CveQuery("")
        with pytest.raises(ValueError):
            CveQuery("Wi-Fi", limit=0)

    def test_record_dict_round_trip(self):
        original = CveRecord(
            cve_id="CVE-2025-1234", cna="Canonical", description="a flaw",
            published=date(2025, 3, 4), severity=Severity.HIGH, patched=False,
            source_url="https://cve.example.org/CVE-2025-1234",
        )
        assert record_from_dict(record_to_dict(original)) == original

    def test_keyword_slug(self):
        assert keyword_slug("Sante DICOM Viewer Pro") == "sante_dicom_viewer_pro"
        assert keyword_slug("Node.js") == "node_js"
        assert keyword_slug("Wi-Fi") == "wi_fi"


class TestFetchRecent:
    def test_unknown_keyword_yields_empty_list(self):
        source = FixtureCveSource(FIXTURES / "devices/dnav/cves")
        assert fetch_recent(CveQuery("hovercraft"), source) == []

    def test_top_10_matches_independent_naive_sort(self):
        source = FixtureCveSource(FIXTURES / "cve_sort")
        got = fetch_recent(CveQuery("wireless stack", 10), source)
        assert len(got) == 10

        # Naive oracle: re-read the raw fixture and sort it from scratch.
        raw = json.loads((FIXTURES / "cve_sort/wireless_stack.json").read_text())
        assert len(raw) == 25

        def naive_key(item):
            year, seq = re.match(r"CVE-(\d+)-(\d+)", item["cve_id"]).groups()
            return (item["published"], int(year), int(seq))

        expected_ids = [item["cve_id"] for item in sorted(raw, key=naive_key, reverse=True)][:10]
        assert [r.cve_id for r in got] == expected_ids

    def test_tiebreak_is_numeric_not_lexicographic(self):
        records = [rec("CVE-2025-9999", "2025-05-01"), rec("CVE-2025-10000", "2025-05-01")]

        class Stub:
            name = "stub"

            def search(self, keyword):
                return list(records)

        got = fetch_recent(CveQuery("x", 2), Stub())
        assert [r.cve_id for r in got] == ["CVE-2025-10000", "CVE-2025-9999"]

    def test_limit_truncates(self):
        source = FixtureCveSource(FIXTURES / "devices/dnav/cves")
        got = fetch_recent(CveQuery("Bluetooth Low Energy", 3), source)
        assert len(got) == 3


class TestCache:
    def test_repeat_query_hits_cache_with_zero_source_calls(self, tmp_path):
        source = CountingSource(FixtureCveSource(FIXTURES / "devices/dnav/cves"))
        cache = CveCache(tmp_path / "cache")
        first = fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache)
        assert source.calls == 1
        second = fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache)
        assert source.calls == 1
        assert second == first

    def test_distinct_limits_are_distinct_entries(self, tmp_path):
        source = CountingSource(FixtureCveSource(FIXTURES / "devices/dnav/cves"))
        cache = CveCache(tmp_path / "cache")
        fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache)
        fetch_recent(CveQuery("Wi-Fi", 6), source, cache=cache)
        assert source.calls == 2

    def test_stale_entry_refetches(self, tmp_path):
        source = CountingSource(FixtureCveSource(FIXTURES / "devices/dnav/cves"))
        cache = CveCache(tmp_path / "cache")
        fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache)
        fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache, max_cache_age=0.0)
        assert source.calls == 2

    def test_clear_removes_entries(self, tmp_path):
        cache = CveCache(tmp_path / "cache")
        source = FixtureCveSource(FIXTURES / "devices/dnav/cves")
        fetch_recent(CveQuery("Wi-Fi", 5), source, cache=cache)
        assert cache.clear() == 1
        assert cache.load("Wi-Fi", 5, source.name) is None

    def test_no_leftover_temp_files(self, tmp_path):
        cache = CveCache(tmp_path / "cache")
        cache.store("Wi-Fi", 5, "fixture:x", [rec("CVE-2025-1111", "2025-01-01")])
        assert list((tmp_path / "cache").glob("*.tmp")) == []


NVD_SAMPLE = {
    "vulnerabilities": [
        {
            "cve": {
                "id": "CVE-2025-1234",
                "sourceIdentifier": "security@vendor.example",
                "published": "2025-02-03T10:15:00.000",
                "descriptions": [{"lang": "en", "value": "a keyword flaw"}],
                "metrics": {"cvssMetricV31": [{"cvssData": {"baseSeverity": "HIGH"}}]},
            }
        },
        {
            "cve": {
                "id": "CVE-2024-9990",
                "sourceIdentifier": "cna@other.example",
                "published": "2024-12-01T00:00:00.000",
                "descriptions": [{"lang": "en", "value": "another flaw"}],
                "metrics": {},
            }
        },
    ]
}


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=None, headers=None):
        self.status_code = status_code
        self.text = text if text is not None else json.dumps(payload)
        self.headers = headers or {}


class TestNvdSource:
    def test_parse_well_formed_payload(self):
        source = NvdCveSource()
        records = source._parse(json.dumps(NVD_SAMPLE))
        assert [r.cve_id for r in records] == ["CVE-2025-1234", "CVE-2024-9990"]
        assert records[0].severity is Severity.HIGH
        assert records[0].published == date(2025, 2, 3)
        assert records[1].severity is None
        assert records[0].patched is None

    def test_malformed_payload_carries_excerpt(self):
        source = NvdCveSource()
        with pytest.raises(MalformedResponseError) as excinfo:
            source._parse("<html>gateway timeout</html>")
        assert "<html>" in excinfo.value.payload_excerpt

    def test_retries_server_errors_then_succeeds(self, monkeypatch):
        responses = [FakeResponse(500, text="oops"),
                     FakeResponse(200, payload=NVD_SAMPLE)]
        calls = []

        def fake_get(url, params=None, headers=None, timeout=None):
            calls.append(url)
            return responses[len(calls) - 1]

        monkeypatch.setattr(cve_client.requests, "get", fake_get)
        source = NvdCveSource(backoff_base=0.0)
        records = source.search("keyword")
        assert len(calls) == 2
        assert len(records) == 2

    def test_exhausted_retries_raise_network_error(self, monkeypatch):
        monkeypatch.setattr(
            cve_client.requests, "get",
            lambda *a, **k: FakeResponse(503, text="down"),
        )
        source = NvdCveSource(retries=2, backoff_base=0.0)
        with pytest.raises(NetworkError):
            source.search("keyword")

    def test_rate_limit_carries_retry_after(self, monkeypatch):
        monkeypatch.setattr(
            cve_client.requests, "get",
            lambda *a, **k: FakeResponse(429, text="slow down", headers={"Retry-After": "7"}),
        )
        source = NvdCveSource(backoff_base=0.0)
        with pytest.raises(RateLimitError) as excinfo:
            source.search("keyword")
        assert excinfo.value.retry_after == 7.0

    def test_api_key_header_from_env(self, monkeypatch):
        seen = {}

        def fake_get(url, params=None, headers=None, timeout=None):
            seen.update(headers)
            return FakeResponse(200, payload={"vulnerabilities": []})

        monkeypatch.setattr(cve_client.requests, "get", fake_get)
        monkeypatch.setenv("NVD_API_KEY", "sekrit")
        NvdCveSource().search("keyword")
        assert seen.get("apiKey") == "sekrit"


class TestTokenBucket:
    def test_limits_burst_rate(self):
        import time

        bucket = TokenBucket(rate_per_sec=200, capacity=1)
        start = time.monotonic()
        for _ in range(11):
            bucket.acquire()
        elapsed = time.monotonic() - start
        # 10 refills at 200/s need at least ~50ms.
        assert elapsed >= 0.045

    def test_burst_capacity_consumed_without_waiting(self):
        import time

        bucket = TokenBucket(rate_per_sec=1, capacity=5)
        start = time.monotonic()
        for _ in range(5):
            bucket.acquire()
        assert time.monotonic() - start < 0.2
