"""Exception types shared across the pipeline."""

from __future__ import annotations


class MedfdiError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(MedfdiError):
    """A config or data file does not match its expected schema.

    Always names the offending key or field in the message.
    """


class ConfigError(MedfdiError):
    """Fatal run configuration problem; aborts before any stage runs."""


class StructurePreconditionError(MedfdiError):
    """An operation was called on a control structure that fails validation."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__(
            "control structure is invalid: " + "; ".join(violations)
        )


class ExtractorUnavailableError(MedfdiError):
    """An extractor backend could not run (e.g. LLM provider failure)."""

    def __init__(self, backend: str, diagnostics: str):
        self.backend = backend
        self.diagnostics = diagnostics
        super().__init__(f"extractor backend {backend!r} unavailable: {diagnostics}")


# --- CVE retrieval ---------------------------------------------------------

class CveClientError(MedfdiError):
    """Base class for vulnerability-source errors."""


class NetworkError(CveClientError):
    """Transient transport failure; safe to retry."""


class RateLimitError(CveClientError):
    """The source rejected the request for quota reasons."""

    def __init__(self, message: str, retry_after: float | None = None):
        self.retry_after = retry_after
        super().__init__(message)


class MalformedResponseError(CveClientError):
    """The source returned an unparseable payload; not retryable."""

    def __init__(self, message: str, payload_excerpt: str = ""):
        self.payload_excerpt = payload_excerpt
        super().__init__(message)


# --- LLM gateway -----------------------------------------------------------

class GatewayError(MedfdiError):
    """Base class for LLM gateway errors."""


class AuthError(GatewayError):
    """Missing or rejected provider credentials; never retried."""


class ProviderTransientError(GatewayError):
    """Provider-side failure that may succeed on retry."""


class BudgetExceededError(GatewayError):
    """The request would exceed the configured token budget."""


class RetryExhaustedError(GatewayError):
    """All retry attempts failed; carries the last diagnostics."""

    def __init__(self, attempts: int, last_error: str):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"gave up after {attempts} attempts: {last_error}")


class FormatViolationError(GatewayError):
    """The model never produced output accepted by the validator.

    ``rejected`` holds every rejected response text, in order.
    """

    def __init__(self, rejected: list[str]):
        self.rejected = rejected
        super().__init__(
            f"response failed format validation after {len(rejected)} attempt(s)"
        )


# --- Scenario parsing ------------------------------------------------------

class ScenarioParseError(MedfdiError):
    """The scenario text does not contain the five stages as required."""

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        super().__init__(message)


class MissingStageError(ScenarioParseError):
    def __init__(self, stage: str):
        super().__init__(f"missing stage: {stage}", stage=stage)


class OutOfOrderStageError(ScenarioParseError):
    def __init__(self, stage: str):
        super().__init__(f"stage out of order: {stage}", stage=stage)


class DuplicateStageError(ScenarioParseError):
    def __init__(self, stage: str):
        super().__init__(f"duplicated stage: {stage}", stage=stage)


class CodeContentError(ScenarioParseError):
    """A stage narrative contains exploit-code-like content."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage {stage} contains code-like content: {detail}", stage=stage)


class ScenarioGenerationError(MedfdiError):
    """Scenario generation failed for one (technology, CVE) pair."""


# --- Judging ---------------------------------------------------------------

class MismatchedVerdictError(MedfdiError):
    """Two judge verdicts cannot be combined (different scenario or same judge)."""


class DivisionDomainError(MedfdiError):
    """A ratio was requested with a zero denominator."""
