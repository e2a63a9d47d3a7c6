"""Dual-judge evaluation of generated attack scenarios.

Two independent judge models each grade every stage of a scenario as correct
or not; a scenario is accepted only when both judges mark all five stages
correct. A judge that never returns the strict JSON shape makes the scenario
unjudgeable, which is reported but excluded from accuracy denominators.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import prompts
from .cve_client import CveRecord
from .errors import FormatViolationError, GatewayError, MismatchedVerdictError
from .llm_gateway import LlmGateway, LlmRequest
from .scenario_generator import CANONICAL_STAGES, AttackScenario

logger = logging.getLogger(__name__)

JUDGE_TEMPERATURE = 0.0


@dataclass(frozen=True)
class JudgeContext:
    system_description: str
    data_flow: str
    cve: CveRecord


@dataclass(frozen=True)
class JudgeVerdict:
    scenario_ref: str
    judge_model_id: str
    per_step: tuple[bool, bool, bool, bool, bool]
    overall: bool

    def __post_init__(self):
        if self.overall != all(self.per_step):
            raise ValueError("overall must equal the conjunction of per_step")


@dataclass(frozen=True)
class CombinedVerdict:
    scenario_ref: str
    verdicts: tuple[JudgeVerdict, JudgeVerdict]
    accepted: bool


@dataclass(frozen=True)
class UnjudgeableScenario:
    """A scenario one or both judges failed to grade in the required format."""

    scenario_ref: str
    judge_model_id: str
    rejected: tuple[str, ...]


def render_judge_prompt(scenario: AttackScenario, context: JudgeContext) -> str:
    """Deterministic judge prompt for one scenario; identical inputs render
    identical bytes."""
    context_block = (
        f"System description: {context.system_description}\n"
        f"Data flow: {context.data_flow}\n"
        f"CVE: {context.cve.cve_id} (CNA: {context.cve.cna})\n"
        f"CVE description: {context.cve.description}"
    )
    plan_block = "\n".join(
        f"{i + 1}) {stage.name.display}: {stage.narrative}"
        for i, stage in enumerate(scenario.stages)
    )
    return prompts.render(prompts.JUDGE_TEMPLATE, {
        "context": context_block,
        "attack_plan": plan_block,
    })


_FENCED_JSON_RE = re.compile(r"^```(?:json)?\s*\n(.*)\n```\s*$", re.DOTALL)


def parse_judge_response(text: str) -> tuple[tuple[bool, ...], bool] | None:
    """Strictly parse the judge's JSON reply.

    Requires a top-level object with exactly the keys ``per_step`` (five
    entries, canonical stage names in canonical order, boolean ``correct``)
    and ``overall_correct``. Returns (per_step, overall_claimed), or None
    when the reply deviates in any way. A single markdown fence around the
    JSON is tolerated.
    """
    body = text.strip()
    fenced = _FENCED_JSON_RE.match(body)
    if fenced:
        body = fenced.group(1).strip()
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict) or set(data) != {"per_step", "overall_correct"}:
        return None
    per_step_raw = data["per_step"]
    if not isinstance(per_step_raw, list) or len(per_step_raw) != len(CANONICAL_STAGES):
        return None
    flags: list[bool] = []
    for item, stage in zip(per_step_raw, CANONICAL_STAGES):
        if not isinstance(item, dict) or set(item) != {"name", "correct"}:
            return None
        if item["name"] != stage.display or not isinstance(item["correct"], bool):
            return None
        flags.append(item["correct"])
    if not isinstance(data["overall_correct"], bool):
        return None
    return tuple(flags), data["overall_correct"]


def judge_once(
    scenario: AttackScenario,
    context: JudgeContext,
    gateway: LlmGateway,
    provider,
) -> JudgeVerdict:
    """One judge's verdict on one scenario.

    ``overall`` is recomputed locally from the per-step booleans; a judge
    whose own overall flag disagrees is logged and overridden. Raises
    FormatViolationError when the judge never produces the strict shape.
    """
    prompt = render_judge_prompt(scenario, context)
    request = LlmRequest(
        prompt=prompt,
        model_id=provider.model_id,
        temperature=JUDGE_TEMPERATURE,
    )
    response = gateway.complete_constrained(
        request, provider, validator=lambda text: parse_judge_response(text) is not None
    )
    parsed = parse_judge_response(response.text)
    assert parsed is not None
    per_step, claimed_overall = parsed
    overall = all(per_step)
    if claimed_overall != overall:
        logger.warning(
            "judge %s self-inconsistent on %s: claimed overall=%s, per-step conjunction=%s",
            provider.model_id, scenario.ref(), claimed_overall, overall,
        )
    return JudgeVerdict(
        scenario_ref=scenario.ref(),
        judge_model_id=response.model_id,
        per_step=per_step,
        overall=overall,
    )


def combine(v1: JudgeVerdict, v2: JudgeVerdict) -> CombinedVerdict:
    """Accept a scenario only when both judges accept every step."""
    if v1.scenario_ref != v2.scenario_ref:
        raise MismatchedVerdictError(
            f"verdicts refer to different scenarios: {v1.scenario_ref!r} vs {v2.scenario_ref!r}"
        )
    if v1.judge_model_id == v2.judge_model_id:
        raise MismatchedVerdictError(
            f"both verdicts come from the same judge model {v1.judge_model_id!r}"
        )
    return CombinedVerdict(
        scenario_ref=v1.scenario_ref,
        verdicts=(v1, v2),
        accepted=v1.overall and v2.overall,
    )


def judge_scenario(
    scenario: AttackScenario,
    context: JudgeContext,
    gateway: LlmGateway,
    providers: tuple[object, object],
) -> CombinedVerdict | UnjudgeableScenario:
    """Run both judges concurrently and combine their verdicts.

    If either judge fails the format contract the scenario comes back as
    UnjudgeableScenario naming the failing judge.
    """
    def _one(provider):
        return judge_once(scenario, context, gateway, provider)

    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(_one, p) for p in providers]
        results = []
        for provider, future in zip(providers, futures):
            try:
                results.append(future.result())
            except FormatViolationError as exc:
                results.append(UnjudgeableScenario(
                    scenario_ref=scenario.ref(),
                    judge_model_id=provider.model_id,
                    rejected=tuple(exc.rejected),
                ))
            except GatewayError as exc:
                results.append(UnjudgeableScenario(
                    scenario_ref=scenario.ref(),
                    judge_model_id=provider.model_id,
                    rejected=(f"<gateway error: {exc}>",),
                ))

    for result in results:
        if isinstance(result, UnjudgeableScenario):
            return result
    return combine(results[0], results[1])
