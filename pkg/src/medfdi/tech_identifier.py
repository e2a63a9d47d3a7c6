"""Technology extraction from device documentation.

Keywords are pulled out of plain-text device documents under seven fixed
technology factor categories, then passed through an exact-word-match check
that removes anything not literally present in the source text (the
hallucination filter), and finally merged across extractor backends into a
deduplicated technology list.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import yaml

from .errors import ExtractorUnavailableError, GatewayError, SchemaError

logger = logging.getLogger(__name__)


class TechnologyFactor(Enum):
    """The seven technology categories used as extraction targets."""

    COMMUNICATION_PROTOCOL = "Communication Protocol"
    COMMUNICATION_ENCRYPTION = "Communication encryption"
    ELECTROMAGNETIC_SUSCEPTIBILITY = "Electromagnetic Susceptibility"
    FIRMWARE = "Firmware"
    HARDWARE = "Hardware"
    OPERATING_SYSTEM = "Operating System"
    EXTERNAL_LIBRARY = "External Library and Data source"

    @property
    def display(self) -> str:
        return self.value

    @property
    def abbrev(self) -> str:
        return _ABBREVS[self]

    @classmethod
    def from_display(cls, text: str) -> "TechnologyFactor":
        for member in cls:
            if member.value == text:
                return member
        raise SchemaError(
            f"unknown technology factor {text!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )


_ABBREVS = {
    TechnologyFactor.COMMUNICATION_PROTOCOL: "CP",
    TechnologyFactor.COMMUNICATION_ENCRYPTION: "ENCR",
    TechnologyFactor.ELECTROMAGNETIC_SUSCEPTIBILITY: "EM",
    TechnologyFactor.FIRMWARE: "FW",
    TechnologyFactor.HARDWARE: "HW",
    TechnologyFactor.OPERATING_SYSTEM: "OS",
    TechnologyFactor.EXTERNAL_LIBRARY: "EXT",
}


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class DocumentCorpus:
    device_name: str
    documents: tuple[Document, ...]

    def __post_init__(self):
        ids = [d.doc_id for d in self.documents]
        if len(ids) != len(set(ids)):
            raise SchemaError("duplicate doc_id in corpus")
        for d in self.documents:
            if not d.text:
                raise SchemaError(f"document {d.doc_id!r} has empty text")

    def document(self, doc_id: str) -> Document:
        for d in self.documents:
            if d.doc_id == doc_id:
                return d
        raise KeyError(doc_id)


@dataclass(frozen=True)
class TechnologyMention:
    """One keyword occurrence attributed to a document and a backend."""

    keyword: str
    factor: TechnologyFactor
    doc_id: str
    char_span: tuple[int, int]
    extractor: str


@dataclass(frozen=True)
class TechnologyEntry:
    keyword: str
    factor: TechnologyFactor
    mentions: tuple[TechnologyMention, ...]


@dataclass(frozen=True)
class TechnologyList:
    device_name: str
    entries: tuple[TechnologyEntry, ...]


# --- Exact-word-match rule ---------------------------------------------------
#
# A keyword "occurs" in a document when its whitespace-collapsed form appears
# case-insensitively at word boundaries. Hyphenation is NOT equated with
# spacing, so "WiFi" never matches "Wi-Fi".

def normalize_keyword(keyword: str) -> str:
    return " ".join(keyword.split()).lower()


def keyword_pattern(keyword: str) -> re.Pattern[str]:
    tokens = keyword.split()
    if not tokens:
        raise ValueError("empty keyword")
    body = r"\s+".join(re.escape(t) for t in tokens)
    return re.compile(
        r"(?<![A-Za-z0-9])" + body + r"(?![A-Za-z0-9])",
        re.IGNORECASE,
    )


def find_keyword(text: str, keyword: str) -> tuple[int, int] | None:
    """First occurrence of ``keyword`` in ``text`` under the match rule."""
    m = keyword_pattern(keyword).search(text)
    if m is None:
        return None
    return (m.start(), m.end())


def iter_keyword_spans(text: str, keyword: str):
    for m in keyword_pattern(keyword).finditer(text):
        yield (m.start(), m.end())


def mention_is_verbatim(mention: TechnologyMention, corpus: DocumentCorpus) -> bool:
    """True when the mention's span really holds its keyword."""
    try:
        doc = corpus.document(mention.doc_id)
    except KeyError:
        return False
    start, end = mention.char_span
    if not (0 <= start <= end <= len(doc.text)):
        return False
    return normalize_keyword(doc.text[start:end]) == normalize_keyword(mention.keyword)


# --- Extractor backends ------------------------------------------------------

class Gazetteer:
    """Per-factor term lexicon backing the rule-based extractor."""

    def __init__(self, terms: dict[TechnologyFactor, list[str]]):
        self.terms = {f: list(ts) for f, ts in terms.items()}

    @classmethod
    def load(cls, path: str | Path) -> "Gazetteer":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise SchemaError(f"{path}: gazetteer must map factor names to term lists")
        terms: dict[TechnologyFactor, list[str]] = {}
        for key, values in data.items():
            factor = TechnologyFactor.from_display(str(key))
            terms[factor] = [str(v) for v in (values or [])]
        return cls(terms)


class GazetteerExtractor:
    """Scans documents for every lexicon term of the requested factors."""

    name = "gazetteer"

    def __init__(self, gazetteer: Gazetteer):
        self.gazetteer = gazetteer

    def run(self, corpus: DocumentCorpus, factors: set[TechnologyFactor]) -> list[TechnologyMention]:
        mentions: list[TechnologyMention] = []
        for factor in sorted(factors, key=lambda f: f.display):
            for term in self.gazetteer.terms.get(factor, []):
                for doc in corpus.documents:
                    for span in iter_keyword_spans(doc.text, term):
                        mentions.append(TechnologyMention(
                            keyword=term,
                            factor=factor,
                            doc_id=doc.doc_id,
                            char_span=span,
                            extractor=self.name,
                        ))
        return mentions


_LLM_EXTRACTION_INSTRUCTIONS = (
    "List every technology the document below names, one per line, in the form\n"
    "factor | keyword\n"
    "where factor is exactly one of: {factors}.\n"
    "Use the keyword exactly as written in the document. Output nothing else.\n"
    "\n"
    "Document ({doc_id}):\n"
    "{text}"
)


class LlmExtractor:
    """Asks a chat model for ``factor | keyword`` lines, one document at a time.

    Candidates are located in the source document to attach a span; anything
    the model invents that cannot be located is kept with an empty span and
    left for the exact-match filter to discard.
    """

    def __init__(self, gateway, provider, temperature: float = 0.0):
        self.gateway = gateway
        self.provider = provider
        self.temperature = temperature
        self.name = f"llm:{provider.model_id}"

    def run(self, corpus: DocumentCorpus, factors: set[TechnologyFactor]) -> list[TechnologyMention]:
        from .llm_gateway import LlmRequest

        allowed = {f.display.lower(): f for f in factors}
        mentions: list[TechnologyMention] = []
        for doc in corpus.documents:
            prompt = _LLM_EXTRACTION_INSTRUCTIONS.format(
                factors="; ".join(f.display for f in TechnologyFactor if f in factors),
                doc_id=doc.doc_id,
                text=doc.text,
            )
            request = LlmRequest(
                prompt=prompt,
                temperature=self.temperature,
                model_id=self.provider.model_id,
            )
            try:
                response = self.gateway.complete(request, self.provider)
            except GatewayError as exc:
                raise ExtractorUnavailableError(self.name, str(exc)) from exc

            for line in response.text.splitlines():
                if "|" not in line:
                    continue
                factor_part, _, keyword_part = line.partition("|")
                factor = allowed.get(factor_part.strip().lower())
                keyword = keyword_part.strip()
                if factor is None or not keyword:
                    continue  # non-conforming lines are dropped
                span = find_keyword(doc.text, keyword) or (0, 0)
                mentions.append(TechnologyMention(
                    keyword=keyword,
                    factor=factor,
                    doc_id=doc.doc_id,
                    char_span=span,
                    extractor=self.name,
                ))
        return mentions


def extract(corpus: DocumentCorpus, factors: set[TechnologyFactor], backend) -> list[TechnologyMention]:
    """Run one extractor backend over the corpus for the given factors."""
    if not factors:
        raise ValueError("factors must be non-empty")
    return backend.run(corpus, factors)


def exact_match_filter(
    mentions: list[TechnologyMention], corpus: DocumentCorpus
) -> list[TechnologyMention]:
    """Drop mentions whose keyword does not literally occur in their document.

    Surviving mentions always carry a span that holds the keyword; a mention
    whose recorded span is wrong but whose keyword does occur elsewhere in
    the document is repaired to the first real occurrence.
    """
    kept: list[TechnologyMention] = []
    for mention in mentions:
        try:
            doc = corpus.document(mention.doc_id)
        except KeyError:
            logger.info("hallucination-filtered: %r (unknown document %r)",
                        mention.keyword, mention.doc_id)
            continue
        if mention_is_verbatim(mention, corpus):
            kept.append(mention)
            continue
        span = find_keyword(doc.text, mention.keyword)
        if span is None:
            logger.info("hallucination-filtered: %r not found in %s",
                        mention.keyword, mention.doc_id)
            continue
        kept.append(TechnologyMention(
            keyword=mention.keyword,
            factor=mention.factor,
            doc_id=mention.doc_id,
            char_span=span,
            extractor=mention.extractor,
        ))
    return kept


_FACTOR_ORDER = {f: i for i, f in enumerate(TechnologyFactor)}


def merge_and_dedup(
    lists: list[list[TechnologyMention]], device_name: str = ""
) -> TechnologyList:
    """Merge filtered mentions from all backends into one deduplicated list.

    Entries are keyed by (normalized keyword, factor); supporting mentions
    from every backend are preserved. Order is factor declaration order, then
    keyword ascending, so the result is independent of backend ordering.
    """
    grouped: dict[tuple[str, TechnologyFactor], list[TechnologyMention]] = {}
    for mentions in lists:
        for m in mentions:
            grouped.setdefault((normalize_keyword(m.keyword), m.factor), []).append(m)

    entries = []
    for (norm_keyword, factor) in sorted(
        grouped, key=lambda k: (_FACTOR_ORDER[k[1]], k[0])
    ):
        mentions = sorted(
            grouped[(norm_keyword, factor)],
            key=lambda m: (m.doc_id, m.char_span, m.extractor),
        )
        entries.append(TechnologyEntry(
            keyword=min(m.keyword for m in mentions),
            factor=factor,
            mentions=tuple(mentions),
        ))
    return TechnologyList(device_name=device_name, entries=tuple(entries))


# --- Corpus loading ----------------------------------------------------------

def load_corpus(manifest_path: str | Path) -> DocumentCorpus:
    """Load a corpus from a manifest listing doc ids and their text files.

    Manifest shape: {device_name: str, documents: [{doc_id, file}]}; files
    are plain text, resolved relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    data = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "documents" not in data:
        raise SchemaError(f"{manifest_path}: corpus manifest needs a 'documents' list")
    documents = []
    for i, raw in enumerate(data["documents"]):
        if "doc_id" not in raw or "file" not in raw:
            raise SchemaError(f"{manifest_path}: documents[{i}] needs 'doc_id' and 'file'")
        text = (manifest_path.parent / raw["file"]).read_text(encoding="utf-8")
        documents.append(Document(doc_id=str(raw["doc_id"]), text=text))
    return DocumentCorpus(
        device_name=str(data.get("device_name", "")),
        documents=tuple(documents),
    )
