"""Attack scenario generation and five-stage plan parsing.

For every (technology, CVE) pair judged relevant, the generation prompt is
rendered from the control structure, the device's ML attack context and the
CVE record, and the completion is parsed into exactly five named stages:
Reconnaissance, Gaining access, Privilege escalation, Attack execution,
Impact. The parser tolerates numbering and markdown adornments but insists
on all five stages, in order, with no exploit-code content.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import yaml

from . import prompts
from .control_structure import ControlStructure, derive_data_flow, validate_structure
from .cve_client import CveRecord
from .errors import (
    CodeContentError,
    DuplicateStageError,
    FormatViolationError,
    MissingStageError,
    OutOfOrderStageError,
    ScenarioGenerationError,
    ScenarioParseError,
    SchemaError,
    StructurePreconditionError,
)
from .llm_gateway import LlmGateway, LlmRequest, prompt_sha256
from .tech_identifier import TechnologyFactor
from .vuln_filter import RelevanceVerdict


class StageName(Enum):
    RECONNAISSANCE = "Reconnaissance"
    GAINING_ACCESS = "Gaining access"
    PRIVILEGE_ESCALATION = "Privilege escalation"
    ATTACK_EXECUTION = "Attack execution"
    IMPACT = "Impact"

    @property
    def display(self) -> str:
        return self.value


CANONICAL_STAGES: tuple[StageName, ...] = tuple(StageName)


@dataclass(frozen=True)
class MlAttackContext:
    """The device's ML technique and the known attack against it.

    This is a declared input per device; the pipeline never infers it.
    """

    ml_technique: str
    ml_attack_name: str
    ml_attack_description: str

    def __post_init__(self):
        for name in ("ml_technique", "ml_attack_name", "ml_attack_description"):
            if not getattr(self, name):
                raise SchemaError(f"ml attack context: {name} must be non-empty")


def load_ml_attack_context(path: str | Path) -> MlAttackContext:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: ml attack context must be a mapping")
    try:
        return MlAttackContext(
            ml_technique=str(data["ml_technique"]),
            ml_attack_name=str(data["ml_attack_name"]),
            ml_attack_description=str(data["ml_attack_description"]),
        )
    except KeyError as exc:
        raise SchemaError(f"{path}: missing key {exc.args[0]!r}") from exc


# --- Exploit-code deny list --------------------------------------------------

_FENCE_RE = re.compile(r"```|~~~")
_SHELL_PROMPT_RE = re.compile(r"^\s*[$#]\s?\S", re.MULTILINE)
_COMMAND_SUBSTRINGS = (
    "sudo ", "rm -rf", "curl ", "wget ", "nmap ", "netcat", "nc -",
    "msfconsole", "meterpreter", "powershell", "/bin/sh", "chmod +x",
    "mkfifo", "base64 -d",
)


def code_content_reason(narrative: str) -> str | None:
    """Why a narrative violates the no-exploit-code rule, or None if clean."""
    if _FENCE_RE.search(narrative):
        return "fenced code block"
    if _SHELL_PROMPT_RE.search(narrative):
        return "shell prompt line"
    lowered = narrative.lower()
    for token in _COMMAND_SUBSTRINGS:
        if token in lowered:
            return f"command fragment {token.strip()!r}"
    return None


@dataclass(frozen=True)
class AttackStage:
    name: StageName
    narrative: str

    def __post_init__(self):
        if not self.narrative:
            raise ScenarioParseError(f"empty narrative for stage {self.name.display}",
                                     stage=self.name.display)
        reason = code_content_reason(self.narrative)
        if reason is not None:
            raise CodeContentError(self.name.display, reason)


@dataclass(frozen=True)
class AttackScenario:
    device_name: str
    factor: TechnologyFactor
    keyword: str
    cve_id: str
    ml_attack_name: str
    stages: tuple[AttackStage, ...]
    prompt_hash: str = ""
    model_id: str = ""

    def __post_init__(self):
        names = tuple(stage.name for stage in self.stages)
        if names != CANONICAL_STAGES:
            raise ScenarioParseError(
                f"stages must be exactly {[s.display for s in CANONICAL_STAGES]}, got "
                f"{[n.display for n in names]}"
            )

    def ref(self) -> str:
        return f"{self.device_name}::{self.factor.abbrev}::{self.keyword}::{self.cve_id}"

    def stage(self, name: StageName) -> AttackStage:
        return self.stages[list(CANONICAL_STAGES).index(name)]


@dataclass(frozen=True)
class ScenarioMetadata:
    device_name: str
    factor: TechnologyFactor
    keyword: str
    cve_id: str
    ml_attack_name: str
    prompt_hash: str = ""
    model_id: str = ""


# --- Prompt rendering --------------------------------------------------------

def render_ml_attack(ml: MlAttackContext) -> str:
    return f"{ml.ml_attack_name} targeting {ml.ml_technique}. {ml.ml_attack_description}"


def render_generation_prompt(
    structure: ControlStructure,
    ml: MlAttackContext,
    factor: TechnologyFactor,
    keyword: str,
    cve: CveRecord,
) -> str:
    """Instantiate the attack-steps template for one (technology, CVE) pair.

    The factor identifies the pair for provenance; the prompt itself targets
    the concrete technology keyword.
    """
    violations = validate_structure(structure)
    if violations:
        raise StructurePreconditionError(violations)
    del factor  # recorded on the scenario, not a template slot
    return prompts.render(prompts.ATTACK_STEPS_TEMPLATE, {
        "system_description": structure.system_description,
        "data_flow": derive_data_flow(structure),
        "ml_attack": render_ml_attack(ml),
        "targeted_technology": keyword,
        "cve_id": cve.cve_id,
        "cna": cve.cna,
        "cve_description": cve.description,
    })


# --- Parsing -----------------------------------------------------------------

_STAGE_ALTERNATION = "|".join(
    re.escape(s.display).replace(r"\ ", r"\s+") for s in CANONICAL_STAGES
)
_HEADER_RE = re.compile(
    r"^(?P<lead>[\s>*_#\-]*)"
    r"(?:step\s+)?"
    r"(?P<num>\(?\d+\)?[\s).:\-]*)?"
    r"(?P<name>" + _STAGE_ALTERNATION + r")"
    r"(?P<sep>\s*(?::|\*\*|__)+)?"
    r"\s*(?P<rest>.*)$",
    re.IGNORECASE,
)

_DISPLAY_TO_STAGE = {s.display.lower(): s for s in CANONICAL_STAGES}


def _match_header(line: str) -> tuple[StageName, str] | None:
    m = _HEADER_RE.match(line.rstrip())
    if m is None:
        return None
    # A bare stage word mid-sentence is narrative, not a header: require
    # numbering, a separator, or nothing after the name.
    if not (m.group("num") or m.group("sep") or not m.group("rest")):
        return None
    name = " ".join(m.group("name").split()).lower()
    rest = m.group("rest").strip().strip("*_").strip()
    return _DISPLAY_TO_STAGE[name], rest


def parse_scenario(text: str, metadata: ScenarioMetadata) -> AttackScenario:
    """Extract the five canonical stages from generated text.

    Headers may carry numbering ("3)", "Step 3:"), markdown bold markers and
    trailing colons; narrative is everything up to the next header. Raises
    MissingStageError / OutOfOrderStageError / DuplicateStageError naming the
    first offending stage, or CodeContentError when a narrative contains
    exploit-code-like content.
    """
    lines = text.splitlines()
    found: list[tuple[StageName, int, str]] = []
    for idx, line in enumerate(lines):
        header = _match_header(line)
        if header is not None:
            found.append((header[0], idx, header[1]))

    seen: set[StageName] = set()
    for stage, _, _ in found:
        if stage in seen:
            raise DuplicateStageError(stage.display)
        seen.add(stage)

    for i, (stage, _, _) in enumerate(found):
        expected = CANONICAL_STAGES[i]
        if stage is not expected:
            if expected not in seen:
                raise MissingStageError(expected.display)
            raise OutOfOrderStageError(stage.display)
    if len(found) < len(CANONICAL_STAGES):
        raise MissingStageError(CANONICAL_STAGES[len(found)].display)

    stages: list[AttackStage] = []
    for i, (stage, line_idx, inline) in enumerate(found):
        end = found[i + 1][1] if i + 1 < len(found) else len(lines)
        block = "\n".join(lines[line_idx + 1:end])
        # Interior blank lines survive; only the narrative's edges are trimmed.
        narrative = f"{inline}\n{block}".strip()
        if not narrative:
            raise ScenarioParseError(f"empty narrative for stage {stage.display}",
                                     stage=stage.display)
        stages.append(AttackStage(name=stage, narrative=narrative))

    return AttackScenario(
        device_name=metadata.device_name,
        factor=metadata.factor,
        keyword=metadata.keyword,
        cve_id=metadata.cve_id,
        ml_attack_name=metadata.ml_attack_name,
        stages=tuple(stages),
        prompt_hash=metadata.prompt_hash,
        model_id=metadata.model_id,
    )


def serialize_scenario_text(scenario: AttackScenario) -> str:
    """Canonical text form; parse_scenario(serialize(s)) == s.stages."""
    return "\n\n".join(
        f"**{stage.name.display}:** {stage.narrative}" for stage in scenario.stages
    )


def parses_as_scenario(text: str) -> bool:
    """Validator predicate for constrained generation."""
    probe = ScenarioMetadata(
        device_name="probe", factor=TechnologyFactor.HARDWARE, keyword="probe",
        cve_id="CVE-0000-0000", ml_attack_name="probe",
    )
    try:
        parse_scenario(text, probe)
    except ScenarioParseError:
        return False
    return True


# --- Generation --------------------------------------------------------------

def generate(
    structure: ControlStructure,
    ml: MlAttackContext,
    verdict: RelevanceVerdict,
    gateway: LlmGateway,
    provider,
    temperature: float = 0.7,
) -> AttackScenario:
    """Generate and parse one scenario for a relevant (technology, CVE) pair."""
    if not verdict.relevant:
        raise ValueError(
            f"cannot generate a scenario for {verdict.query.cve.cve_id}: "
            "relevance verdict is NO"
        )
    prompt = render_generation_prompt(
        structure, ml, verdict.query.factor, verdict.query.keyword, verdict.query.cve
    )
    request = LlmRequest(prompt=prompt, model_id=provider.model_id, temperature=temperature)
    try:
        response = gateway.complete_constrained(
            request, provider, validator=parses_as_scenario
        )
    except FormatViolationError as exc:
        raise ScenarioGenerationError(
            f"no parseable scenario for ({verdict.query.keyword}, "
            f"{verdict.query.cve.cve_id}) after {len(exc.rejected)} attempt(s)"
        ) from exc

    metadata = ScenarioMetadata(
        device_name=structure.device_name,
        factor=verdict.query.factor,
        keyword=verdict.query.keyword,
        cve_id=verdict.query.cve.cve_id,
        ml_attack_name=ml.ml_attack_name,
        prompt_hash=prompt_sha256("", prompt),
        model_id=response.model_id,
    )
    return parse_scenario(response.text, metadata)


# --- Serialization -----------------------------------------------------------

def scenario_to_dict(s: AttackScenario) -> dict:
    return {
        "device_name": s.device_name,
        "factor": s.factor.display,
        "keyword": s.keyword,
        "cve_id": s.cve_id,
        "ml_attack_name": s.ml_attack_name,
        "stages": [
            {"name": stage.name.display, "narrative": stage.narrative}
            for stage in s.stages
        ],
        "prompt_hash": s.prompt_hash,
        "model_id": s.model_id,
    }


def scenario_from_dict(data: dict) -> AttackScenario:
    return AttackScenario(
        device_name=data["device_name"],
        factor=TechnologyFactor.from_display(data["factor"]),
        keyword=data["keyword"],
        cve_id=data["cve_id"],
        ml_attack_name=data["ml_attack_name"],
        stages=tuple(
            AttackStage(name=_DISPLAY_TO_STAGE[item["name"].lower()],
                        narrative=item["narrative"])
            for item in data["stages"]
        ),
        prompt_hash=data.get("prompt_hash", ""),
        model_id=data.get("model_id", ""),
    )
