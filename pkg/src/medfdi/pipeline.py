"""End-to-end orchestration: one device profile in, one run report out.

Stages run as sequential barriers (validate, extract, retrieve, filter,
generate, judge, metrics); within a stage items fan out concurrently.
Item-level failures (an undecided verdict, a scenario that never parsed, an
unjudgeable plan) are recorded in the report and never abort the run; only
configuration problems abort, before stage one.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__, judge, metrics, report, scenario_generator, vuln_filter
from .control_structure import derive_data_flow, load_control_structure, validate_structure
from .cve_client import CveCache, CveQuery, FixtureCveSource, NvdCveSource, TokenBucket, fetch_recent
from .errors import ConfigError, MedfdiError, ScenarioGenerationError, SchemaError
from .llm_gateway import LlmGateway, load_providers
from .scenario_generator import load_ml_attack_context
from .tech_identifier import (
    Gazetteer,
    GazetteerExtractor,
    LlmExtractor,
    TechnologyFactor,
    TechnologyList,
    exact_match_filter,
    extract,
    load_corpus,
    merge_and_dedup,
)

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    control_structure_path: Path
    corpus_manifest_path: Path
    ml_attack_path: Path
    gazetteer_path: Path
    providers_path: Path
    output_dir: Path
    annotations_path: Path | None = None
    backends: list[str] = field(default_factory=lambda: ["gazetteer"])
    extractor_model: str | None = None
    cve_source: str = "fixture"
    cve_fixture_dir: Path | None = None
    nvd_api_key_env: str = "NVD_API_KEY"
    nvd_rate_per_sec: float = 1.5
    top_n: int = 10
    cache_dir: Path | None = None
    max_cache_age: float | None = None
    mode: str = "mock"
    filter_model: str = "gpt-4o"
    generator_model: str = "gpt-4o"
    judge_models: list[str] = field(default_factory=lambda: ["gpt-o3", "gemini-2.5-pro"])
    temperature: float = 0.7
    concurrency: int = 4
    raw: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if self.mode not in ("mock", "live"):
            raise ConfigError(f"mode must be 'mock' or 'live', got {self.mode!r}")
        if len(self.judge_models) != 2 or self.judge_models[0] == self.judge_models[1]:
            raise ConfigError("exactly two distinct judge models are required")
        for label, path in [
            ("control_structure", self.control_structure_path),
            ("corpus_manifest", self.corpus_manifest_path),
            ("ml_attack", self.ml_attack_path),
            ("gazetteer", self.gazetteer_path),
            ("providers", self.providers_path),
        ]:
            if not Path(path).exists():
                raise ConfigError(f"{label} path does not exist: {path}")
        if self.annotations_path is not None and not self.annotations_path.exists():
            raise ConfigError(f"annotations path does not exist: {self.annotations_path}")
        if self.cve_source == "fixture":
            if self.cve_fixture_dir is None or not self.cve_fixture_dir.is_dir():
                raise ConfigError(f"cve fixture_dir does not exist: {self.cve_fixture_dir}")
        elif self.cve_source != "nvd":
            raise ConfigError(f"unknown cve source {self.cve_source!r}")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a run config file; all paths resolve relative to the file."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: run config must be a mapping")

    base = path.parent

    def resolve(value: str | None) -> Path | None:
        return (base / value).resolve() if value else None

    device = data.get("device", {})
    extraction = data.get("extraction", {})
    cve = data.get("cve", {})
    llm = data.get("llm", {})
    output = data.get("output", {})

    known = {"device", "extraction", "cve", "llm", "output"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config section {sorted(unknown)[0]!r}")

    cfg = RunConfig(
        control_structure_path=resolve(device.get("control_structure")) or Path("missing"),
        corpus_manifest_path=resolve(device.get("corpus_manifest")) or Path("missing"),
        ml_attack_path=resolve(device.get("ml_attack")) or Path("missing"),
        annotations_path=resolve(device.get("annotations")),
        gazetteer_path=resolve(extraction.get("gazetteer")) or Path("missing"),
        backends=list(extraction.get("backends", ["gazetteer"])),
        extractor_model=extraction.get("llm_model"),
        cve_source=cve.get("source", "fixture"),
        cve_fixture_dir=resolve(cve.get("fixture_dir")),
        nvd_api_key_env=cve.get("api_key_env", "NVD_API_KEY"),
        nvd_rate_per_sec=float(cve.get("requests_per_second", 1.5)),
        top_n=int(cve.get("top_n", 10)),
        cache_dir=resolve(cve.get("cache_dir")),
        max_cache_age=cve.get("max_cache_age"),
        providers_path=resolve(llm.get("providers")) or Path("missing"),
        mode=llm.get("mode", "mock"),
        filter_model=llm.get("filter_model", "gpt-4o"),
        generator_model=llm.get("generator_model", "gpt-4o"),
        judge_models=list(llm.get("judge_models", ["gpt-o3", "gemini-2.5-pro"])),
        temperature=float(llm.get("temperature", 0.7)),
        concurrency=int(llm.get("concurrency", 4)),
        output_dir=resolve(output.get("dir")) or (base / "out").resolve(),
        raw=data,
    )
    return cfg


@dataclass(frozen=True)
class Annotations:
    technologies: frozenset[tuple[str, TechnologyFactor]]
    verified_cve_ids: frozenset[str]


def load_annotations(path: str | Path) -> Annotations:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: annotations must be a mapping")
    technologies = frozenset(
        (str(item["keyword"]), TechnologyFactor.from_display(str(item["factor"])))
        for item in data.get("technologies", [])
    )
    verified = frozenset(str(v) for v in data.get("verified_cve_ids", []))
    return Annotations(technologies=technologies, verified_cve_ids=verified)


class _StageClock:
    def __init__(self):
        self.stages: dict[str, float] = {}
        self._t0 = time.perf_counter()
        self.started_at = datetime.now(timezone.utc).isoformat()

    def mark(self, stage: str, started: float) -> None:
        self.stages[stage] = round(time.perf_counter() - started, 6)

    def block(self) -> dict:
        return {
            "started_at": self.started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "total_seconds": round(time.perf_counter() - self._t0, 6),
            "stages": self.stages,
        }


def run_pipeline(cfg: RunConfig) -> report.RunReport:
    """Execute every stage for one device and write its report atomically."""
    cfg.validate()
    clock = _StageClock()

    # Stage 0: inputs. Any failure here is fatal and aborts the run.
    t = time.perf_counter()
    structure = load_control_structure(cfg.control_structure_path)
    violations = validate_structure(structure)
    if violations:
        raise ConfigError(
            "control structure invalid: " + "; ".join(violations)
        )
    corpus = load_corpus(cfg.corpus_manifest_path)
    ml_context = load_ml_attack_context(cfg.ml_attack_path)
    annotations = (
        load_annotations(cfg.annotations_path) if cfg.annotations_path else None
    )
    gazetteer = Gazetteer.load(cfg.gazetteer_path)
    providers = load_providers(cfg.providers_path, mode=cfg.mode)
    for role, model in [
        ("filter", cfg.filter_model),
        ("generator", cfg.generator_model),
        ("judge", cfg.judge_models[0]),
        ("judge", cfg.judge_models[1]),
    ]:
        if model not in providers:
            raise ConfigError(f"{role} model {model!r} not in provider config")

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    audit_path = cfg.output_dir / f"{structure.device_name}.audit.ndjson"
    if audit_path.exists():
        audit_path.unlink()
    gateway = LlmGateway(
        provider_concurrency=cfg.concurrency,
        audit_path=audit_path,
        backoff_base=0.2,
    )
    clock.mark("validate", t)

    # Stage 1: technology identification.
    t = time.perf_counter()
    factors = set(TechnologyFactor)
    mention_lists = []
    for backend_name in cfg.backends:
        if backend_name == "gazetteer":
            backend = GazetteerExtractor(gazetteer)
        elif backend_name == "llm":
            model = cfg.extractor_model or cfg.filter_model
            backend = LlmExtractor(gateway, providers[model])
        else:
            raise ConfigError(f"unknown extractor backend {backend_name!r}")
        mentions = extract(corpus, factors, backend)
        mention_lists.append(exact_match_filter(mentions, corpus))
    technologies = merge_and_dedup(mention_lists, device_name=structure.device_name)
    clock.mark("extract", t)

    # Stage 2: CVE retrieval per technology keyword.
    t = time.perf_counter()
    if cfg.cve_source == "fixture":
        source = FixtureCveSource(cfg.cve_fixture_dir)
    else:
        source = NvdCveSource(
            api_key_env=cfg.nvd_api_key_env,
            rate_limiter=TokenBucket(cfg.nvd_rate_per_sec),
        )
    cache = CveCache(cfg.cache_dir) if cfg.cache_dir else None

    def _fetch(entry):
        records = fetch_recent(
            CveQuery(keyword=entry.keyword, limit=cfg.top_n),
            source, cache=cache, max_cache_age=cfg.max_cache_age,
        )
        return report.KeywordCves(
            factor=entry.factor, keyword=entry.keyword, records=tuple(records)
        )

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        retrieval = tuple(pool.map(_fetch, technologies.entries))
    clock.mark("retrieve", t)

    # Stage 3: relevance filtering.
    t = time.perf_counter()
    queries = [
        vuln_filter.RelevanceQuery(
            device_description=structure.system_description,
            factor=block.factor,
            keyword=block.keyword,
            cve=record,
        )
        for block in retrieval
        for record in block.records
    ]
    outcomes = vuln_filter.assess_batch(
        queries, gateway, providers[cfg.filter_model],
        temperature=cfg.temperature, max_workers=cfg.concurrency,
    )
    verdict_rows = []
    relevant_verdicts = []
    for outcome in outcomes:
        q = outcome.query
        if isinstance(outcome, vuln_filter.RelevanceVerdict):
            status = report.VERDICT_RELEVANT if outcome.relevant else report.VERDICT_NOT_RELEVANT
            verdict_rows.append(report.VerdictRow(
                factor=q.factor, keyword=q.keyword, cve_id=q.cve.cve_id,
                status=status, raw_token=outcome.raw_token,
                model_id=outcome.model_id, prompt_sha256=outcome.prompt_sha256,
            ))
            if outcome.relevant:
                relevant_verdicts.append(outcome)
        else:
            verdict_rows.append(report.VerdictRow(
                factor=q.factor, keyword=q.keyword, cve_id=q.cve.cve_id,
                status=report.VERDICT_UNDECIDED, raw_token=None,
                model_id=outcome.model_id, prompt_sha256=outcome.prompt_sha256,
            ))
    clock.mark("filter", t)

    # Stage 4: scenario generation for relevant pairs.
    t = time.perf_counter()

    def _generate(verdict):
        try:
            scenario = scenario_generator.generate(
                structure, ml_context, verdict, gateway,
                providers[cfg.generator_model], temperature=cfg.temperature,
            )
            return (verdict, scenario, None)
        except (ScenarioGenerationError, MedfdiError) as exc:
            return (verdict, None, str(exc))

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        generated = list(pool.map(_generate, relevant_verdicts))
    clock.mark("generate", t)

    # Stage 5: dual-judge evaluation.
    t = time.perf_counter()
    data_flow = derive_data_flow(structure)
    judge_providers = (providers[cfg.judge_models[0]], providers[cfg.judge_models[1]])

    def _judge(item):
        verdict, scenario, failure = item
        if scenario is None:
            return report.ScenarioRow(
                factor=verdict.query.factor, keyword=verdict.query.keyword,
                cve_id=verdict.query.cve.cve_id, status=report.SCENARIO_FAILED,
                failure=failure,
            )
        context = judge.JudgeContext(
            system_description=structure.system_description,
            data_flow=data_flow,
            cve=verdict.query.cve,
        )
        outcome = judge.judge_scenario(scenario, context, gateway, judge_providers)
        if isinstance(outcome, judge.UnjudgeableScenario):
            return report.ScenarioRow(
                factor=scenario.factor, keyword=scenario.keyword,
                cve_id=scenario.cve_id, status=report.SCENARIO_UNJUDGEABLE,
                scenario=scenario,
                failure=f"judge {outcome.judge_model_id} format violation",
            )
        status = report.SCENARIO_ACCEPTED if outcome.accepted else report.SCENARIO_REJECTED
        return report.ScenarioRow(
            factor=scenario.factor, keyword=scenario.keyword,
            cve_id=scenario.cve_id, status=status,
            scenario=scenario, judges=outcome.verdicts,
        )

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        scenario_rows = tuple(pool.map(_judge, generated))
    clock.mark("judge", t)

    # Stage 6: metrics.
    t = time.perf_counter()
    run_report = _assemble_report(
        cfg, structure.device_name, structure.system_description, data_flow,
        technologies, retrieval, tuple(verdict_rows), scenario_rows, annotations,
    )
    clock.mark("metrics", t)
    run_report.timing = clock.block()

    base = cfg.output_dir / structure.device_name
    data = report.report_to_dict(run_report)
    report.write_atomic(Path(f"{base}.report.json"), report.render_report(data, "json"))
    report.write_atomic(Path(f"{base}.report.md"), report.render_report(data, "markdown"))
    return run_report


def _assemble_report(
    cfg: RunConfig,
    device_name: str,
    system_description: str,
    data_flow: str,
    technologies: TechnologyList,
    retrieval: tuple,
    verdict_rows: tuple,
    scenario_rows: tuple,
    annotations: Annotations | None,
) -> report.RunReport:
    tech_counts: dict[TechnologyFactor, int] = {}
    for entry in technologies.entries:
        tech_counts[entry.factor] = tech_counts.get(entry.factor, 0) + 1

    retrieved = sum(len(block.records) for block in retrieval)
    auto_cve = sum(1 for v in verdict_rows if v.status == report.VERDICT_RELEVANT)
    unjudgeable = sum(1 for s in scenario_rows if s.status == report.SCENARIO_UNJUDGEABLE)
    accepted = sum(1 for s in scenario_rows if s.status == report.SCENARIO_ACCEPTED)
    generated_total = sum(1 for s in scenario_rows if s.status != report.SCENARIO_FAILED)

    verified: int | None = None
    tech_eval = None
    if annotations is not None:
        relevant_ids = {v.cve_id for v in verdict_rows if v.status == report.VERDICT_RELEVANT}
        verified = len(annotations.verified_cve_ids & relevant_ids)
        tech_eval = metrics.tech_precision_recall(technologies, set(annotations.technologies))

    counts = metrics.DeviceCounts(
        device=device_name,
        retrieved=retrieved,
        auto_cve=auto_cve,
        verified_cve=verified,
        scenarios_total=generated_total,
        scenarios_accepted=accepted,
        scenarios_unjudgeable=unjudgeable,
        tech_counts=tech_counts,
    )
    effort = metrics.effort_estimate(metrics.EffortInputs(x=retrieved, y=auto_cve))

    return report.RunReport(
        device_name=device_name,
        tool_version=__version__,
        config=cfg.raw,
        system_description=system_description,
        data_flow=data_flow,
        technologies=technologies,
        retrieval=retrieval,
        verdicts=verdict_rows,
        scenarios=scenario_rows,
        counts=counts,
        effort=effort,
        tech_eval=tech_eval,
    )


def has_item_errors(run_report: report.RunReport) -> bool:
    """True when any per-item failure was recorded (exit code 2)."""
    undecided = any(v.status == report.VERDICT_UNDECIDED for v in run_report.verdicts)
    trouble = any(
        s.status in (report.SCENARIO_FAILED, report.SCENARIO_UNJUDGEABLE)
        for s in run_report.scenarios
    )
    return undecided or trouble
