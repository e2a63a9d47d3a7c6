"""Technology extraction, the exact-word-match filter, and merging."""

from __future__ import annotations

import random

import pytest

from medfdi.errors import ExtractorUnavailableError, SchemaError
from medfdi.llm_gateway import LlmGateway
from medfdi.tech_identifier import (
    Document,
    DocumentCorpus,
    Gazetteer,
    GazetteerExtractor,
    LlmExtractor,
    TechnologyFactor,
    TechnologyMention,
    exact_match_filter,
    extract,
    find_keyword,
    load_corpus,
    mention_is_verbatim,
    merge_and_dedup,
    normalize_keyword,
)

from conftest import FIXTURES, make_mock

CP = TechnologyFactor.COMMUNICATION_PROTOCOL
OS = TechnologyFactor.OPERATING_SYSTEM
EXT = TechnologyFactor.EXTERNAL_LIBRARY


def corpus_of(text: str, doc_id: str = "doc") -> DocumentCorpus:
    return DocumentCorpus(device_name="dev", documents=(Document(doc_id, text),))


class TestFactorEnum:
    def test_exactly_seven_members(self):
        assert len(TechnologyFactor) == 7

    def test_display_strings(self):
        assert CP.display == "Communication Protocol"
        assert TechnologyFactor.COMMUNICATION_ENCRYPTION.display == "Communication encryption"
        assert EXT.display == "External Library and Data source"

    def test_abbrevs_cover_summary_columns(self):
        assert [f.abbrev for f in TechnologyFactor] == [
            "CP", "ENCR", "EM", "FW", "HW", "OS", "EXT",
        ]

    def test_from_display_round_trip_and_error(self):
        for f in TechnologyFactor:
            assert TechnologyFactor.from_display(f.display) is f
        with pytest.raises(SchemaError):
            TechnologyFactor.from_display("Middleware")


class TestMatchRule:
    def test_simple_hit_with_span(self):
        text = "transmits readings over Bluetooth Low Energy to the app"
        span = find_keyword(text, "Bluetooth Low Energy")
        assert span is not None
        assert text[span[0]:span[1]] == "Bluetooth Low Energy"

    def test_case_insensitive(self):
        assert find_keyword("uses BLUETOOTH low energy", "Bluetooth Low Energy")

    def test_whitespace_collapses_across_linebreaks(self):
        assert find_keyword("pairs over Bluetooth\n   Low Energy links", "Bluetooth Low Energy")

    def test_hyphen_and_space_not_equated(self):
        assert find_keyword("joins the Wi-Fi network", "WiFi") is None
        assert find_keyword("joins the WiFi network", "Wi-Fi") is None
        assert find_keyword("joins the Wi-Fi network", "Wi-Fi") is not None

    def test_word_boundaries_prevent_substring_hits(self):
        assert find_keyword("the BIOS settings", "iOS") is None
        assert find_keyword("total cost of ownership", "OS") is None
        assert find_keyword("runs iOS 16", "iOS") is not None

    def test_punctuation_in_keyword(self):
        assert find_keyword("served by a Node.js application", "Node.js") is not None
        assert find_keyword("nodejs is different", "Node.js") is None

    def test_normalize_keyword(self):
        assert normalize_keyword("  Bluetooth   Low\tEnergy ") == "bluetooth low energy"


class TestExtract:
    def test_gazetteer_single_hit(self):
        corpus = corpus_of("transmits readings over Bluetooth Low Energy")
        gaz = Gazetteer({CP: ["Bluetooth Low Energy"]})
        mentions = extract(corpus, {CP}, GazetteerExtractor(gaz))
        assert len(mentions) == 1
        m = mentions[0]
        assert m.factor is CP and m.extractor == "gazetteer"
        assert mention_is_verbatim(m, corpus)

    def test_empty_factor_set_rejected(self):
        gaz = Gazetteer({CP: ["Bluetooth Low Energy"]})
        with pytest.raises(ValueError):
            extract(corpus_of("text"), set(), GazetteerExtractor(gaz))

    def test_factors_restrict_output(self):
        corpus = corpus_of("Android devices join over Wi-Fi")
        gaz = Gazetteer({CP: ["Wi-Fi"], OS: ["Android"]})
        mentions = extract(corpus, {OS}, GazetteerExtractor(gaz))
        assert {m.factor for m in mentions} == {OS}

    def test_dnav_fixture_counts_match_published_row(self):
        corpus = load_corpus(FIXTURES / "devices/dnav/corpus/manifest.yaml")
        gaz = Gazetteer.load(FIXTURES / "gazetteer.yaml")
        mentions = extract(corpus, set(TechnologyFactor), GazetteerExtractor(gaz))
        merged = merge_and_dedup([exact_match_filter(mentions, corpus)], "d-Nav")
        by_factor: dict[str, int] = {}
        for entry in merged.entries:
            by_factor[entry.factor.abbrev] = by_factor.get(entry.factor.abbrev, 0) + 1
        assert by_factor == {"CP": 2, "ENCR": 1, "OS": 2, "EXT": 5}
        assert len(merged.entries) == 10


class TestLlmBackend:
    def test_candidates_are_parsed_located_and_nonconforming_lines_dropped(self):
        text = "The gateway runs Android and syncs over Wi-Fi nightly."
        corpus = corpus_of(text)
        reply = "\n".join([
            "Operating System | Android",
            "Communication Protocol | Wi-Fi",
            "Communication Protocol | Zigbee",          # hallucinated
            "Middleware | dbus",                        # unknown factor
            "no separator on this line",
        ])
        provider = make_mock("extractor", default=reply)
        backend = LlmExtractor(LlmGateway(backoff_base=0.0), provider)
        mentions = extract(corpus, set(TechnologyFactor), backend)
        keywords = {m.keyword for m in mentions}
        assert keywords == {"Android", "Wi-Fi", "Zigbee"}
        zigbee = next(m for m in mentions if m.keyword == "Zigbee")
        assert zigbee.char_span == (0, 0)  # not locatable; filter will drop it
        android = next(m for m in mentions if m.keyword == "Android")
        assert mention_is_verbatim(android, corpus)
        assert android.extractor == "llm:extractor"

    def test_provider_failure_surfaces_as_extractor_unavailable(self):
        provider = make_mock("extractor")  # no default: every call fails
        backend = LlmExtractor(LlmGateway(backoff_base=0.0, retry_cap=1), provider)
        with pytest.raises(ExtractorUnavailableError, match="extractor"):
            extract(corpus_of("text"), {CP}, backend)


class TestExactMatchFilter:
    def test_absent_keyword_removed(self):
        corpus = corpus_of("no radios are mentioned here")
        mention = TechnologyMention("Zigbee", CP, "doc", (0, 6), "llm:x")
        assert exact_match_filter([mention], corpus) == []

    def test_exact_span_retained(self):
        corpus = corpus_of("uses Zigbee mesh")
        mention = TechnologyMention("Zigbee", CP, "doc", (5, 11), "gazetteer")
        assert exact_match_filter([mention], corpus) == [mention]

    def test_wifi_variant_removed_under_strict_rule(self):
        corpus = corpus_of("connects to the Wi-Fi network")
        mention = TechnologyMention("WiFi", CP, "doc", (0, 0), "llm:x")
        assert exact_match_filter([mention], corpus) == []

    def test_bad_span_is_repaired_when_keyword_occurs(self):
        text = "padding padding Wi-Fi here"
        corpus = corpus_of(text)
        mention = TechnologyMention("Wi-Fi", CP, "doc", (0, 0), "llm:x")
        kept = exact_match_filter([mention], corpus)
        assert len(kept) == 1
        assert mention_is_verbatim(kept[0], corpus)

    def test_unknown_document_removed(self):
        corpus = corpus_of("Wi-Fi", doc_id="a")
        mention = TechnologyMention("Wi-Fi", CP, "other", (0, 5), "llm:x")
        assert exact_match_filter([mention], corpus) == []

    def test_idempotent_and_sound_on_randomized_cases(self):
        rng = random.Random(9)
        vocab = ["sensor", "gateway", "records", "patient", "stream", "nightly"]
        keywords = ["Wi-Fi", "Bluetooth Low Energy", "Node.js", "Zigbee", "TLS"]
        for _ in range(200):
            words = [rng.choice(vocab) for _ in range(rng.randint(5, 30))]
            for kw in keywords:
                if rng.random() < 0.4:
                    words.insert(rng.randint(0, len(words)), kw)
            corpus = corpus_of(" ".join(words))
            mentions = [
                TechnologyMention(kw, CP, "doc", (0, 0), "llm:x") for kw in keywords
            ]
            once = exact_match_filter(mentions, corpus)
            twice = exact_match_filter(once, corpus)
            assert once == twice
            for m in once:
                assert mention_is_verbatim(m, corpus)
            surviving = {m.keyword for m in once}
            for kw in keywords:
                assert (kw in surviving) == (find_keyword(corpus.documents[0].text, kw) is not None)


class TestMergeAndDedup:
    def test_same_keyword_from_two_backends_collapses(self):
        corpus = corpus_of("runs on Linux hosts")
        a = exact_match_filter([TechnologyMention("Linux", OS, "doc", (8, 13), "gazetteer")], corpus)
        b = exact_match_filter([TechnologyMention("linux", OS, "doc", (0, 0), "llm:x")], corpus)
        merged = merge_and_dedup([a, b], "dev")
        assert len(merged.entries) == 1
        entry = merged.entries[0]
        assert len(entry.mentions) == 2
        assert {m.extractor for m in entry.mentions} == {"gazetteer", "llm:x"}

    def test_same_keyword_under_two_factors_stays_distinct(self):
        merged = merge_and_dedup([[
            TechnologyMention("TLS", TechnologyFactor.COMMUNICATION_ENCRYPTION, "doc", (0, 3), "gazetteer"),
            TechnologyMention("TLS", CP, "doc", (0, 3), "gazetteer"),
        ]], "dev")
        assert len(merged.entries) == 2

    def test_empty_input(self):
        merged = merge_and_dedup([], "dev")
        assert merged.entries == ()
        assert merged.device_name == "dev"

    def test_order_is_factor_then_keyword_and_backend_order_irrelevant(self):
        a = [TechnologyMention("Zigbee", CP, "doc", (0, 6), "gazetteer")]
        b = [
            TechnologyMention("Android", OS, "doc", (0, 7), "llm:x"),
            TechnologyMention("Bluetooth Low Energy", CP, "doc", (8, 28), "llm:x"),
        ]
        forward = merge_and_dedup([a, b], "dev")
        backward = merge_and_dedup([b, a], "dev")
        assert forward == backward
        assert [e.keyword for e in forward.entries] == [
            "Bluetooth Low Energy", "Zigbee", "Android",
        ]

    def test_five_device_union_covers_thirty_distinct_technologies(self):
        gaz = Gazetteer.load(FIXTURES / "gazetteer.yaml")
        union: set[tuple[str, TechnologyFactor]] = set()
        for key in ("dnav", "abmd", "idx", "kidscore", "oxehealth"):
            corpus = load_corpus(FIXTURES / "devices" / key / "corpus" / "manifest.yaml")
            mentions = extract(corpus, set(TechnologyFactor), GazetteerExtractor(gaz))
            merged = merge_and_dedup([exact_match_filter(mentions, corpus)], key)
            union |= {(normalize_keyword(e.keyword), e.factor) for e in merged.entries}
        assert len(union) == 30


class TestCorpusLoading:
    def test_manifest_lists_ids_and_files(self):
        corpus = load_corpus(FIXTURES / "devices/dnav/corpus/manifest.yaml")
        assert corpus.device_name == "d-Nav"
        assert [d.doc_id for d in corpus.documents] == ["dnav-510k-summary", "dnav-user-guide"]

    def test_duplicate_doc_ids_rejected(self):
        with pytest.raises(SchemaError, match="duplicate doc_id"):
            DocumentCorpus("dev", (Document("a", "x"), Document("a", "y")))

    def test_empty_document_rejected(self):
        with pytest.raises(SchemaError, match="empty text"):
            DocumentCorpus("dev", (Document("a", ""),))
