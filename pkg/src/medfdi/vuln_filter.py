"""CVE relevance triage: can this vulnerability feed false data to the ML?

Each (device, technology factor, CVE) triple is rendered into the strict
YES/NO relevance prompt and sent through the gateway. Responses that are not
a bare YES or NO token are re-prompted; a triple that never yields a clean
token is reported as undecided rather than silently dropped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import prompts
from .cve_client import CveRecord
from .errors import FormatViolationError, GatewayError
from .llm_gateway import LlmGateway, LlmRequest, prompt_sha256
from .tech_identifier import TechnologyFactor


@dataclass(frozen=True)
class RelevanceQuery:
    device_description: str
    factor: TechnologyFactor
    keyword: str
    cve: CveRecord

    def __post_init__(self):
        if not self.device_description:
            raise ValueError("device_description must be non-empty")
        if not self.keyword:
            raise ValueError("keyword must be non-empty")


@dataclass(frozen=True)
class RelevanceVerdict:
    query: RelevanceQuery
    relevant: bool
    raw_token: str
    model_id: str
    prompt_sha256: str = ""

    def __post_init__(self):
        if self.raw_token not in ("YES", "NO"):
            raise ValueError(f"raw_token must be YES or NO, got {self.raw_token!r}")
        if self.relevant != (self.raw_token == "YES"):
            raise ValueError("relevant flag inconsistent with raw_token")


@dataclass(frozen=True)
class UndecidedRelevance:
    """A query whose responses never satisfied the YES/NO contract."""

    query: RelevanceQuery
    model_id: str
    rejected: tuple[str, ...]
    prompt_sha256: str = ""


def render_filter_prompt(q: RelevanceQuery) -> str:
    """Instantiate the relevance template; identical queries render identical bytes."""
    return prompts.render(prompts.CVE_RELEVANCE_TEMPLATE, {
        "cve": q.cve.cve_id,
        "description": q.cve.description,
        "device": q.device_description,
        "factor": q.factor.display,
        "cna": q.cve.cna,
    })


def parse_verdict_token(text: str) -> bool | None:
    """Map a response to True (YES) / False (NO), or None when malformed.

    Leniency is minimal: surrounding whitespace and one trailing period are
    tolerated, case is ignored. Anything else (extra words, both tokens,
    empty text) is rejected.
    """
    token = text.strip()
    if token.endswith("."):
        token = token[:-1]
    token = token.strip().upper()
    if token == "YES":
        return True
    if token == "NO":
        return False
    return None


def assess(
    q: RelevanceQuery,
    gateway: LlmGateway,
    provider,
    temperature: float = 0.7,
) -> RelevanceVerdict:
    """One relevance decision. Raises FormatViolationError when the model
    never produces a clean token; callers decide how to surface that."""
    prompt = render_filter_prompt(q)
    request = LlmRequest(prompt=prompt, model_id=provider.model_id, temperature=temperature)
    response = gateway.complete_constrained(
        request, provider, validator=lambda text: parse_verdict_token(text) is not None
    )
    relevant = parse_verdict_token(response.text)
    assert relevant is not None
    return RelevanceVerdict(
        query=q,
        relevant=relevant,
        raw_token="YES" if relevant else "NO",
        model_id=response.model_id,
        prompt_sha256=prompt_sha256("", prompt),
    )


def assess_batch(
    queries: list[RelevanceQuery],
    gateway: LlmGateway,
    provider,
    temperature: float = 0.7,
    max_workers: int = 4,
) -> list[RelevanceVerdict | UndecidedRelevance]:
    """Fan out over ``assess``; output order matches input order.

    A failure on one item never aborts the batch: that item comes back as
    UndecidedRelevance and the rest are unaffected.
    """
    if not queries:
        return []

    def _one(q: RelevanceQuery) -> RelevanceVerdict | UndecidedRelevance:
        try:
            return assess(q, gateway, provider, temperature=temperature)
        except FormatViolationError as exc:
            return UndecidedRelevance(
                query=q,
                model_id=provider.model_id,
                rejected=tuple(exc.rejected),
                prompt_sha256=prompt_sha256("", render_filter_prompt(q)),
            )
        except GatewayError as exc:
            return UndecidedRelevance(
                query=q,
                model_id=provider.model_id,
                rejected=(f"<gateway error: {exc}>",),
                prompt_sha256=prompt_sha256("", render_filter_prompt(q)),
            )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_one, queries))
