"""Shared fixtures: device bundles and the scripted mock environment.

The five device profiles under tests/fixtures/devices are static. What the
mock LLM providers should answer is spelled out per device in plan.yaml
(which CVEs the filter marks YES, which scenarios the judges reject or fail
to grade); this conftest renders the real prompts, hashes them and writes
one mock script per model into a session tmp directory, plus a ready-to-run
config file per device.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import yaml

from medfdi.control_structure import ControlStructure, derive_data_flow, load_control_structure
from medfdi.cve_client import CveQuery, CveRecord, FixtureCveSource, fetch_recent
from medfdi.judge import JudgeContext, render_judge_prompt
from medfdi.llm_gateway import LlmGateway, MockLlmProvider, prompt_sha256
from medfdi.scenario_generator import (
    CANONICAL_STAGES,
    MlAttackContext,
    ScenarioMetadata,
    load_ml_attack_context,
    parse_scenario,
    render_generation_prompt,
)
from medfdi.tech_identifier import (
    Gazetteer,
    GazetteerExtractor,
    TechnologyEntry,
    TechnologyFactor,
    exact_match_filter,
    extract,
    load_corpus,
    merge_and_dedup,
)
from medfdi.vuln_filter import RelevanceQuery, render_filter_prompt

FIXTURES = Path(__file__).parent / "fixtures"
DEVICE_KEYS = ("dnav", "abmd", "idx", "kidscore", "oxehealth")

FILTER_MODEL = "gpt-4o"
GENERATOR_MODEL = "gpt-4o"
JUDGE_MODELS = ("gpt-o3", "gemini-2.5-pro")

IDX_GOLDEN_CVE = "CVE-2025-5307"


@dataclass
class DeviceBundle:
    key: str
    structure: ControlStructure
    ml: MlAttackContext
    relevant: dict[str, list[str]]
    unjudgeable: set[str]
    rejected: set[str]
    verified: set[str]
    entries: tuple[TechnologyEntry, ...]
    retrieval: list[tuple[TechnologyEntry, list[CveRecord]]]
    expected_tech_counts: dict[str, int] = field(default_factory=dict)

    @property
    def device_name(self) -> str:
        return self.structure.device_name

    @property
    def expected_retrieved(self) -> int:
        return sum(len(records) for _, records in self.retrieval)

    @property
    def expected_relevant(self) -> int:
        return sum(len(ids) for ids in self.relevant.values())

    @property
    def expected_unjudgeable(self) -> int:
        return len(self.unjudgeable)

    @property
    def expected_accepted(self) -> int:
        return self.expected_relevant - len(self.unjudgeable) - len(self.rejected)


def load_device_bundle(key: str) -> DeviceBundle:
    base = FIXTURES / "devices" / key
    structure = load_control_structure(base / "control_structure.yaml")
    corpus = load_corpus(base / "corpus" / "manifest.yaml")
    ml = load_ml_attack_context(base / "ml_attack.yaml")
    plan = yaml.safe_load((base / "plan.yaml").read_text(encoding="utf-8"))
    annotations = yaml.safe_load((base / "annotations.yaml").read_text(encoding="utf-8"))

    gazetteer = Gazetteer.load(FIXTURES / "gazetteer.yaml")
    mentions = extract(corpus, set(TechnologyFactor), GazetteerExtractor(gazetteer))
    technologies = merge_and_dedup(
        [exact_match_filter(mentions, corpus)], device_name=structure.device_name
    )

    source = FixtureCveSource(base / "cves")
    retrieval = [
        (entry, fetch_recent(CveQuery(entry.keyword, 10), source))
        for entry in technologies.entries
    ]
    counts: dict[str, int] = {}
    for entry in technologies.entries:
        counts[entry.factor.abbrev] = counts.get(entry.factor.abbrev, 0) + 1

    return DeviceBundle(
        key=key,
        structure=structure,
        ml=ml,
        relevant={k: list(v) for k, v in (plan.get("relevant") or {}).items()},
        unjudgeable=set(plan.get("unjudgeable") or []),
        rejected=set(plan.get("rejected") or []),
        verified=set(annotations.get("verified_cve_ids") or []),
        entries=technologies.entries,
        retrieval=retrieval,
        expected_tech_counts=counts,
    )


def synth_scenario_text(device: str, keyword: str, cve: CveRecord) -> str:
    """A deterministic, parseable five-stage plan for mock generation."""
    stages = {
        "Reconnaissance": (
            f"The adversary maps the {device} deployment, identifies the role of "
            f"{keyword} in the data path, and studies {cve.cve_id} to understand "
            f"the weakness it describes."
        ),
        "Gaining access": (
            f"Using exposure of the component that runs {keyword}, the adversary "
            f"obtains a foothold on the segment where the affected interface is "
            f"reachable."
        ),
        "Privilege escalation": (
            f"The adversary leverages {cve.cve_id} to raise their privileges on "
            f"the compromised component until they can influence the data it "
            f"emits."
        ),
        "Attack execution": (
            f"With control of {keyword}, the adversary alters the values flowing "
            f"toward the ML component of {device}, injecting fabricated inputs "
            f"that remain within plausible ranges."
        ),
        "Impact": (
            f"The ML component of {device} processes the fabricated inputs and "
            f"produces misleading outputs, so downstream clinical decisions are "
            f"made on false information, putting the patient at risk."
        ),
    }
    return "\n\n".join(f"**{name}:** {text}" for name, text in stages.items())


def judge_json(per_step: list[bool]) -> str:
    return json.dumps({
        "per_step": [
            {"name": stage.display, "correct": flag}
            for stage, flag in zip(CANONICAL_STAGES, per_step)
        ],
        "overall_correct": all(per_step),
    })


def build_scripts(bundles: dict[str, DeviceBundle]) -> dict[str, dict]:
    """Render every prompt the pipeline will send and script its response."""
    scripts: dict[str, dict] = {
        FILTER_MODEL: {"responses": {}},
        JUDGE_MODELS[0]: {
            "responses": {},
            "default": "I cannot grade this plan without more information.",
        },
        JUDGE_MODELS[1]: {"responses": {}},
    }
    golden_text = (FIXTURES / "golden" / "idx_scenario.txt").read_text(encoding="utf-8")

    for bundle in bundles.values():
        structure = bundle.structure
        data_flow = derive_data_flow(structure)
        for entry, records in bundle.retrieval:
            yes_ids = set(bundle.relevant.get(entry.keyword, []))
            for record in records:
                query = RelevanceQuery(
                    device_description=structure.system_description,
                    factor=entry.factor,
                    keyword=entry.keyword,
                    cve=record,
                )
                fp = render_filter_prompt(query)
                is_yes = record.cve_id in yes_ids
                scripts[FILTER_MODEL]["responses"][prompt_sha256("", fp)] = (
                    "YES" if is_yes else "NO"
                )
                if not is_yes:
                    continue

                gp = render_generation_prompt(
                    structure, bundle.ml, entry.factor, entry.keyword, record
                )
                text = (
                    golden_text if record.cve_id == IDX_GOLDEN_CVE
                    else synth_scenario_text(structure.device_name, entry.keyword, record)
                )
                scripts[GENERATOR_MODEL]["responses"][prompt_sha256("", gp)] = text

                scenario = parse_scenario(text, ScenarioMetadata(
                    device_name=structure.device_name,
                    factor=entry.factor,
                    keyword=entry.keyword,
                    cve_id=record.cve_id,
                    ml_attack_name=bundle.ml.ml_attack_name,
                ))
                jp = render_judge_prompt(scenario, JudgeContext(
                    system_description=structure.system_description,
                    data_flow=data_flow,
                    cve=record,
                ))
                judge_hash = prompt_sha256("", jp)
                # Judge 1 stays silent (falls to its prose default) for the
                # planned unjudgeable scenarios; judge 2 rejects the planned
                # rejections with one failed step.
                if record.cve_id not in bundle.unjudgeable:
                    scripts[JUDGE_MODELS[0]]["responses"][judge_hash] = judge_json(
                        [True] * 5
                    )
                if record.cve_id in bundle.rejected:
                    scripts[JUDGE_MODELS[1]]["responses"][judge_hash] = judge_json(
                        [True, True, False, True, True]
                    )
                else:
                    scripts[JUDGE_MODELS[1]]["responses"][judge_hash] = judge_json(
                        [True] * 5
                    )
    return scripts


@dataclass
class MockEnv:
    root: Path
    providers_path: Path
    configs: dict[str, Path]
    bundles: dict[str, DeviceBundle]
    scripts: dict[str, dict]

    def out_dir(self, key: str) -> Path:
        return self.root / "out" / key


def build_mock_environment(root: Path) -> MockEnv:
    bundles = {key: load_device_bundle(key) for key in DEVICE_KEYS}
    scripts = build_scripts(bundles)

    scripts_dir = root / "scripts"
    scripts_dir.mkdir(parents=True, exist_ok=True)
    provider_entries = []
    for model_id, script in scripts.items():
        script_path = scripts_dir / f"{model_id}.json"
        script_path.write_text(json.dumps(script, indent=2), encoding="utf-8")
        provider_entries.append({
            "name": f"mock-{model_id}",
            "kind": "mock",
            "model_id": model_id,
            "script": str(script_path),
        })
    providers_path = root / "providers.yaml"
    providers_path.write_text(
        yaml.safe_dump({"providers": provider_entries}, sort_keys=False),
        encoding="utf-8",
    )

    configs = {}
    for key, bundle in bundles.items():
        base = FIXTURES / "devices" / key
        config = {
            "device": {
                "control_structure": str(base / "control_structure.yaml"),
                "corpus_manifest": str(base / "corpus" / "manifest.yaml"),
                "ml_attack": str(base / "ml_attack.yaml"),
                "annotations": str(base / "annotations.yaml"),
            },
            "extraction": {
                "gazetteer": str(FIXTURES / "gazetteer.yaml"),
                "backends": ["gazetteer"],
            },
            "cve": {
                "source": "fixture",
                "fixture_dir": str(base / "cves"),
                "top_n": 10,
            },
            "llm": {
                "providers": str(providers_path),
                "mode": "mock",
                "filter_model": FILTER_MODEL,
                "generator_model": GENERATOR_MODEL,
                "judge_models": list(JUDGE_MODELS),
                "temperature": 0.7,
                "concurrency": 4,
            },
            "output": {"dir": str(root / "out" / key)},
        }
        config_path = root / f"{key}.config.yaml"
        config_path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
        configs[key] = config_path

    return MockEnv(
        root=root,
        providers_path=providers_path,
        configs=configs,
        bundles=bundles,
        scripts=scripts,
    )


@pytest.fixture(scope="session")
def mock_env(tmp_path_factory) -> MockEnv:
    return build_mock_environment(tmp_path_factory.mktemp("mockenv"))


@pytest.fixture()
def gateway() -> LlmGateway:
    # No backoff delay: unit tests exercise retries without sleeping.
    return LlmGateway(backoff_base=0.0)


def make_mock(model_id: str, responses: dict[str, str] | None = None,
              default: str | None = None, by_prompt: dict[str, str] | None = None) -> MockLlmProvider:
    """Mock provider helper; ``by_prompt`` keys raw prompt text for you."""
    hashed = dict(responses or {})
    for prompt, reply in (by_prompt or {}).items():
        hashed[prompt_sha256("", prompt)] = reply
    script: dict = {"responses": hashed}
    if default is not None:
        script["default"] = default
    return MockLlmProvider(model_id, script)
