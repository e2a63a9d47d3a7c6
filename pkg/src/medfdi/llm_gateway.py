"""Uniform access to chat-completion providers, plus a scripted offline mock.

Every LLM call in the pipeline goes through ``LlmGateway.complete`` or
``complete_constrained``; providers are injected handles, so swapping the
scripted mock for a live endpoint never touches calling code. The gateway
retries transient failures with bounded backoff, re-prompts on malformed
output, limits in-flight calls per provider, and appends every
request/response pair to an audit log that can replay a run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import requests
import yaml

from .errors import (
    AuthError,
    BudgetExceededError,
    ConfigError,
    FormatViolationError,
    ProviderTransientError,
    RetryExhaustedError,
    SchemaError,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_RETRY_CAP = 3
DEFAULT_REPROMPT_CAP = 2
DEFAULT_PROVIDER_CONCURRENCY = 4

REPROMPT_INSTRUCTION = (
    "Your previous reply did not match the required output format. "
    "Follow the format instructions exactly and resend only the requested output."
)


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    model_id: str
    role_preamble: str = ""
    temperature: float = DEFAULT_TEMPERATURE
    max_output: int = 2048

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output < 1:
            raise ValueError("max_output must be >= 1")


@dataclass(frozen=True)
class LlmResponse:
    text: str
    model_id: str
    latency: float
    input_tokens: int
    output_tokens: int
    attempt: int = 1


def normalize_prompt(role_preamble: str, prompt: str) -> str:
    full = f"{role_preamble}\n\n{prompt}" if role_preamble else prompt
    return full.replace("\r\n", "\n").strip()


def prompt_sha256(role_preamble: str, prompt: str) -> str:
    return hashlib.sha256(normalize_prompt(role_preamble, prompt).encode("utf-8")).hexdigest()


def reask_prompt(prompt: str) -> str:
    """The deterministic corrective re-prompt used after a format violation."""
    return f"{prompt}\n\n{REPROMPT_INSTRUCTION}"


# --- Providers ---------------------------------------------------------------

class MockLlmProvider:
    """Scripted provider: responses keyed by sha256 of the normalized prompt.

    Script shape: {"responses": {hash: text}, "default": text}. An unknown
    prompt falls back to the default entry when present, otherwise raises.
    Identical (prompt, script) pairs always yield identical bytes.
    """

    kind = "mock"

    def __init__(self, model_id: str, script: dict, name: str = "mock"):
        self.model_id = model_id
        self.name = name
        self.responses: dict[str, str] = dict(script.get("responses", {}))
        self.default: str | None = script.get("default")
        self.calls = 0

    def invoke(self, request: LlmRequest) -> tuple[str, int, int]:
        self.calls += 1
        key = prompt_sha256(request.role_preamble, request.prompt)
        text = self.responses.get(key)
        if text is None:
            if self.default is None:
                raise ProviderTransientError(
                    f"mock script for {self.model_id} has no entry for prompt {key[:12]}..."
                )
            text = self.default
        return text, len(request.prompt.split()), len(text.split())


def load_mock_script(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "responses" not in data:
        raise SchemaError(f"{path}: mock script needs a 'responses' mapping")
    return data


def script_from_audit_log(path: str | Path, model_id: str | None = None) -> dict:
    """Rebuild a mock script from an audit log, optionally for one model.

    First occurrence wins per (hash): replaying the log through the mock
    reproduces the original responses.
    """
    responses: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            entry = json.loads(line)
            if model_id is not None and entry["model_id"] != model_id:
                continue
            responses.setdefault(entry["prompt_sha256"], entry["response"])
    return {"responses": responses}


class OpenAiCompatProvider:
    """Minimal chat-completions client for OpenAI-style HTTP endpoints."""

    kind = "http"

    def __init__(self, model_id: str, endpoint: str, api_key_env: str,
                 name: str = "http", timeout: float = 120.0):
        self.model_id = model_id
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.name = name
        self.timeout = timeout

    def invoke(self, request: LlmRequest) -> tuple[str, int, int]:
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise AuthError(f"environment variable {self.api_key_env} is not set")
        messages = []
        if request.role_preamble:
            messages.append({"role": "system", "content": request.role_preamble})
        messages.append({"role": "user", "content": request.prompt})
        body = {
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        try:
            resp = requests.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ProviderTransientError(f"{self.name}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"{self.name}: credentials rejected ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderTransientError(f"{self.name}: status {resp.status_code}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderTransientError(f"{self.name}: malformed response: {exc}") from exc
        return text, usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)


# --- Gateway -----------------------------------------------------------------

class LlmGateway:
    """Retry, re-prompt, concurrency-limit and audit all provider calls."""

    def __init__(
        self,
        retry_cap: int = DEFAULT_RETRY_CAP,
        reprompt_cap: int = DEFAULT_REPROMPT_CAP,
        backoff_base: float = 0.5,
        provider_concurrency: int = DEFAULT_PROVIDER_CONCURRENCY,
        audit_path: str | Path | None = None,
    ):
        self.retry_cap = retry_cap
        self.reprompt_cap = reprompt_cap
        self.backoff_base = backoff_base
        self.provider_concurrency = provider_concurrency
        self.audit_path = Path(audit_path) if audit_path else None
        self._audit_lock = threading.Lock()
        self._semaphores: dict[str, threading.Semaphore] = {}
        self._semaphores_lock = threading.Lock()

    def _semaphore(self, provider_name: str) -> threading.Semaphore:
        with self._semaphores_lock:
            if provider_name not in self._semaphores:
                self._semaphores[provider_name] = threading.Semaphore(self.provider_concurrency)
            return self._semaphores[provider_name]

    def complete(self, request: LlmRequest, provider) -> LlmResponse:
        """First successful completion, retrying transient failures.

        Auth and budget errors propagate immediately; transient errors are
        retried up to the cap with exponential backoff, then re-raised as
        RetryExhaustedError carrying the last diagnostics.
        """
        last_error: Exception | None = None
        semaphore = self._semaphore(provider.name)
        for attempt in range(1, self.retry_cap + 1):
            started = time.perf_counter()
            try:
                with semaphore:
                    text, tok_in, tok_out = provider.invoke(request)
            except (AuthError, BudgetExceededError):
                raise
            except ProviderTransientError as exc:
                last_error = exc
                if attempt < self.retry_cap:
                    time.sleep(self.backoff_base * 2 ** (attempt - 1))
                continue
            latency = time.perf_counter() - started
            response = LlmResponse(
                text=text,
                model_id=provider.model_id,
                latency=latency,
                input_tokens=tok_in,
                output_tokens=tok_out,
                attempt=attempt,
            )
            self._audit(request, response, provider)
            return response
        assert last_error is not None
        raise RetryExhaustedError(self.retry_cap, str(last_error)) from last_error

    def complete_constrained(
        self,
        request: LlmRequest,
        provider,
        validator,
        max_reprompts: int | None = None,
    ) -> LlmResponse:
        """Completion whose text must satisfy ``validator``.

        Each rejection re-asks with a corrective instruction appended, up to
        ``max_reprompts`` extra rounds; the returned response's ``attempt``
        counts every call made. All rejected texts travel with the final
        FormatViolationError.
        """
        if max_reprompts is None:
            max_reprompts = self.reprompt_cap
        rejected: list[str] = []
        current = request
        calls = 0
        for round_no in range(max_reprompts + 1):
            response = self.complete(current, provider)
            calls += response.attempt
            if validator(response.text):
                return replace(response, attempt=calls)
            rejected.append(response.text)
            if round_no < max_reprompts:
                current = replace(current, prompt=reask_prompt(current.prompt))
        raise FormatViolationError(rejected)

    def _audit(self, request: LlmRequest, response: LlmResponse, provider) -> None:
        if self.audit_path is None:
            return
        entry = {
            "provider": provider.name,
            "model_id": response.model_id,
            "prompt_sha256": prompt_sha256(request.role_preamble, request.prompt),
            "prompt": normalize_prompt(request.role_preamble, request.prompt),
            "response": response.text,
            "attempt": response.attempt,
            "latency_s": round(response.latency, 6),
        }
        line = json.dumps(entry, ensure_ascii=False)
        with self._audit_lock:
            with open(self.audit_path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


# --- Provider config ---------------------------------------------------------

def load_providers(path: str | Path, mode: str, base_dir: str | Path | None = None) -> dict[str, object]:
    """Build a model_id -> provider registry from a provider config file.

    Config shape: {providers: [{name, kind, model_id, script | endpoint +
    api_key_env}]}. In live mode every http provider must have its
    credential environment variable set; the error names the variable.
    """
    path = Path(path)
    base = Path(base_dir) if base_dir else path.parent
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "providers" not in data:
        raise SchemaError(f"{path}: provider config needs a 'providers' list")

    registry: dict[str, object] = {}
    for i, raw in enumerate(data["providers"]):
        kind = raw.get("kind", "http")
        model_id = raw.get("model_id")
        if not model_id:
            raise SchemaError(f"{path}: providers[{i}] missing 'model_id'")
        name = raw.get("name", kind)
        if kind == "mock":
            if mode == "live":
                raise ConfigError(f"provider {name!r} is a mock but mode is live")
            script_path = raw.get("script")
            if not script_path:
                raise SchemaError(f"{path}: providers[{i}] (mock) missing 'script'")
            script = load_mock_script(base / script_path)
            registry[model_id] = MockLlmProvider(model_id, script, name=name)
        elif kind == "http":
            if mode == "mock":
                raise ConfigError(f"provider {name!r} is live but mode is mock")
            endpoint = raw.get("endpoint")
            api_key_env = raw.get("api_key_env")
            if not endpoint or not api_key_env:
                raise SchemaError(f"{path}: providers[{i}] needs 'endpoint' and 'api_key_env'")
            if not os.environ.get(api_key_env):
                raise ConfigError(f"missing provider credentials: set {api_key_env}")
            registry[model_id] = OpenAiCompatProvider(model_id, endpoint, api_key_env, name=name)
        else:
            raise SchemaError(f"{path}: providers[{i}] unknown kind {kind!r}")
    return registry
