"""Run report model, JSON/Markdown rendering, and integrity validation.

A report is self-contained: it embeds the device context, every retrieved
CVE record, every relevance verdict, every scenario with its judge verdicts,
and the metrics block, so later commands can re-judge or recompute metrics
from the file alone. Timestamps live only in the timing block, which lets
golden-file comparisons mask them.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .cve_client import CveRecord, record_from_dict, record_to_dict
from .judge import JudgeVerdict
from .metrics import CountTable, DeviceCounts, EffortEstimate, PrecisionRecall
from .scenario_generator import AttackScenario, scenario_from_dict, scenario_to_dict
from .tech_identifier import TechnologyFactor, TechnologyList

SCHEMA_VERSION = 1

VERDICT_RELEVANT = "relevant"
VERDICT_NOT_RELEVANT = "not_relevant"
VERDICT_UNDECIDED = "undecided"

SCENARIO_ACCEPTED = "accepted"
SCENARIO_REJECTED = "rejected"
SCENARIO_UNJUDGEABLE = "unjudgeable"
SCENARIO_FAILED = "failed"


@dataclass(frozen=True)
class KeywordCves:
    factor: TechnologyFactor
    keyword: str
    records: tuple[CveRecord, ...]


@dataclass(frozen=True)
class VerdictRow:
    factor: TechnologyFactor
    keyword: str
    cve_id: str
    status: str
    raw_token: str | None
    model_id: str
    prompt_sha256: str


@dataclass(frozen=True)
class ScenarioRow:
    factor: TechnologyFactor
    keyword: str
    cve_id: str
    status: str
    scenario: AttackScenario | None = None
    judges: tuple[JudgeVerdict, ...] = ()
    failure: str | None = None

    @property
    def accepted(self) -> bool | None:
        if self.status == SCENARIO_ACCEPTED:
            return True
        if self.status == SCENARIO_REJECTED:
            return False
        return None


@dataclass
class RunReport:
    device_name: str
    tool_version: str
    config: dict
    system_description: str
    data_flow: str
    technologies: TechnologyList
    retrieval: tuple[KeywordCves, ...]
    verdicts: tuple[VerdictRow, ...]
    scenarios: tuple[ScenarioRow, ...]
    counts: DeviceCounts
    effort: EffortEstimate
    tech_eval: PrecisionRecall | None = None
    timing: dict = field(default_factory=dict)


def _tech_counts_dict(counts: DeviceCounts) -> dict[str, int]:
    return {f.abbrev: counts.tech_counts.get(f, 0) for f in TechnologyFactor}


def report_to_dict(r: RunReport) -> dict:
    metrics_block: dict = {
        "tech_entries": len(r.technologies.entries),
        "tech_counts": _tech_counts_dict(r.counts),
        "retrieved": r.counts.retrieved,
        "auto_cve": r.counts.auto_cve,
        "verified_cve": r.counts.verified_cve,
        "undecided": sum(1 for v in r.verdicts if v.status == VERDICT_UNDECIDED),
        "scenarios_total": r.counts.scenarios_total,
        "scenarios_failed": sum(1 for s in r.scenarios if s.status == SCENARIO_FAILED),
        "scenarios_unjudgeable": r.counts.scenarios_unjudgeable,
        "scenarios_accepted": r.counts.scenarios_accepted,
        "asg_accuracy_percent": r.counts.asg_accuracy_percent(),
        "effort": {
            "manual_minutes": r.effort.manual_minutes,
            "automated_seconds": r.effort.automated_seconds,
        },
    }
    if r.tech_eval is not None:
        metrics_block["tech_precision"] = r.tech_eval.precision
        metrics_block["tech_recall"] = r.tech_eval.recall
        metrics_block["tech_false_positives"] = [
            {"keyword": k, "factor": f.display} for k, f in r.tech_eval.false_positives
        ]
        metrics_block["tech_false_negatives"] = [
            {"keyword": k, "factor": f.display} for k, f in r.tech_eval.false_negatives
        ]

    return {
        "schema_version": SCHEMA_VERSION,
        "device_name": r.device_name,
        "tool_version": r.tool_version,
        "config": r.config,
        "context": {
            "system_description": r.system_description,
            "data_flow": r.data_flow,
        },
        "technologies": {
            "device_name": r.technologies.device_name,
            "entries": [
                {
                    "keyword": e.keyword,
                    "factor": e.factor.display,
                    "mentions": [
                        {
                            "doc_id": m.doc_id,
                            "char_span": list(m.char_span),
                            "extractor": m.extractor,
                        }
                        for m in e.mentions
                    ],
                }
                for e in r.technologies.entries
            ],
        },
        "retrieval": [
            {
                "factor": kc.factor.display,
                "keyword": kc.keyword,
                "records": [record_to_dict(rec) for rec in kc.records],
            }
            for kc in r.retrieval
        ],
        "verdicts": [
            {
                "factor": v.factor.display,
                "keyword": v.keyword,
                "cve_id": v.cve_id,
                "status": v.status,
                "raw_token": v.raw_token,
                "model_id": v.model_id,
                "prompt_sha256": v.prompt_sha256,
            }
            for v in r.verdicts
        ],
        "scenarios": [
            {
                "factor": s.factor.display,
                "keyword": s.keyword,
                "cve_id": s.cve_id,
                "status": s.status,
                "accepted": s.accepted,
                "scenario": scenario_to_dict(s.scenario) if s.scenario else None,
                "judges": [
                    {
                        "judge_model_id": j.judge_model_id,
                        "per_step": list(j.per_step),
                        "overall": j.overall,
                    }
                    for j in s.judges
                ],
                "failure": s.failure,
            }
            for s in r.scenarios
        ],
        "metrics": metrics_block,
        "timing": r.timing,
    }


def scenario_rows_from_dict(data: dict) -> list[ScenarioRow]:
    rows = []
    for raw in data["scenarios"]:
        judges = tuple(
            JudgeVerdict(
                scenario_ref="",
                judge_model_id=j["judge_model_id"],
                per_step=tuple(j["per_step"]),
                overall=j["overall"],
            )
            for j in raw["judges"]
        )
        rows.append(ScenarioRow(
            factor=TechnologyFactor.from_display(raw["factor"]),
            keyword=raw["keyword"],
            cve_id=raw["cve_id"],
            status=raw["status"],
            scenario=scenario_from_dict(raw["scenario"]) if raw["scenario"] else None,
            judges=judges,
            failure=raw.get("failure"),
        ))
    return rows


def retrieval_from_dict(data: dict) -> list[KeywordCves]:
    return [
        KeywordCves(
            factor=TechnologyFactor.from_display(raw["factor"]),
            keyword=raw["keyword"],
            records=tuple(record_from_dict(rec) for rec in raw["records"]),
        )
        for raw in data["retrieval"]
    ]


# --- Integrity validation ----------------------------------------------------

def validate_report(data: dict) -> list[str]:
    """Referential-integrity check over a report dict.

    Every scenario must trace to a relevant verdict, every verdict to a
    fetched record, and the metrics counters must agree with the listed
    rows. Returns one message per violation; empty means consistent.
    """
    problems: list[str] = []

    fetched: set[tuple[str, str]] = set()
    retrieved_total = 0
    for block in data.get("retrieval", []):
        for rec in block["records"]:
            fetched.add((block["keyword"], rec["cve_id"]))
            retrieved_total += 1

    relevant: set[tuple[str, str]] = set()
    undecided = 0
    for v in data.get("verdicts", []):
        key = (v["keyword"], v["cve_id"])
        if key not in fetched:
            problems.append(
                f"verdict references unfetched CVE {v['cve_id']} for keyword {v['keyword']!r}"
            )
        if v["status"] == VERDICT_RELEVANT:
            relevant.add(key)
        elif v["status"] == VERDICT_UNDECIDED:
            undecided += 1

    accepted = 0
    unjudgeable = 0
    failed = 0
    for s in data.get("scenarios", []):
        key = (s["keyword"], s["cve_id"])
        if key not in relevant:
            problems.append(
                f"scenario for {s['cve_id']} ({s['keyword']!r}) has no relevant verdict"
            )
        if s["scenario"] is not None:
            inner = s["scenario"]
            if (inner["keyword"], inner["cve_id"]) != key:
                problems.append(f"scenario provenance mismatch for {s['cve_id']}")
        if s["status"] == SCENARIO_ACCEPTED:
            accepted += 1
        elif s["status"] == SCENARIO_UNJUDGEABLE:
            unjudgeable += 1
        elif s["status"] == SCENARIO_FAILED:
            failed += 1

    m = data.get("metrics", {})
    checks = [
        ("retrieved", retrieved_total),
        ("auto_cve", len(relevant)),
        ("undecided", undecided),
        ("scenarios_accepted", accepted),
        ("scenarios_unjudgeable", unjudgeable),
        ("scenarios_failed", failed),
    ]
    for name, actual in checks:
        if m.get(name) != actual:
            problems.append(f"metrics.{name}={m.get(name)} but rows show {actual}")

    return problems


# --- Rendering ---------------------------------------------------------------

def _fmt_pct(value: float | None) -> str:
    return "-" if value is None else f"{value}"


def render_markdown(data: dict) -> str:
    m = data["metrics"]
    counts = m["tech_counts"]
    lines: list[str] = []
    lines.append(f"# Analysis report: {data['device_name']}")
    lines.append("")
    lines.append(f"Tool version {data['tool_version']}.")
    lines.append("")
    lines.append("## Summary")
    lines.append("")
    header = ["Device"] + [f.abbrev for f in TechnologyFactor] + [
        "Retrieved", "AutoCVE", "VerifiedCVE", "ASG accuracy (%)",
    ]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    row = [data["device_name"]]
    for f in TechnologyFactor:
        n = counts.get(f.abbrev, 0)
        row.append(str(n) if n else "-")
    row.append(str(m["retrieved"]))
    row.append(str(m["auto_cve"]))
    row.append("-" if m["verified_cve"] is None else str(m["verified_cve"]))
    row.append(_fmt_pct(m["asg_accuracy_percent"]))
    lines.append("| " + " | ".join(row) + " |")
    lines.append("")

    lines.append("## Technologies")
    lines.append("")
    for entry in data["technologies"]["entries"]:
        docs = sorted({mention["doc_id"] for mention in entry["mentions"]})
        lines.append(f"- **{entry['keyword']}** ({entry['factor']}) in {', '.join(docs)}")
    if not data["technologies"]["entries"]:
        lines.append("(none found)")
    lines.append("")

    lines.append("## Vulnerabilities")
    lines.append("")
    verdict_by_key = {
        (v["keyword"], v["cve_id"]): v for v in data["verdicts"]
    }
    for block in data["retrieval"]:
        lines.append(f"### {block['keyword']} ({block['factor']})")
        lines.append("")
        if not block["records"]:
            lines.append("No CVE records found.")
            lines.append("")
            continue
        for rec in block["records"]:
            verdict = verdict_by_key.get((block["keyword"], rec["cve_id"]))
            status = verdict["status"] if verdict else "unassessed"
            severity = rec["severity"] or "unrated"
            lines.append(
                f"- {rec['cve_id']} ({rec['published']}, {severity}): "
                f"{status}"
            )
        lines.append("")

    lines.append("## Attack scenarios")
    lines.append("")
    if not data["scenarios"]:
        lines.append("No scenarios were generated.")
        lines.append("")
    for s in data["scenarios"]:
        lines.append(f"### {s['keyword']} / {s['cve_id']}")
        lines.append("")
        lines.append(f"Status: {s['status']}")
        lines.append("")
        if s["scenario"] is not None:
            for stage in s["scenario"]["stages"]:
                lines.append(f"**{stage['name']}:** {stage['narrative']}")
                lines.append("")
        elif s["failure"]:
            lines.append(f"Generation failed: {s['failure']}")
            lines.append("")

    lines.append("## Metrics")
    lines.append("")
    lines.append(f"- Technologies extracted: {m['tech_entries']}")
    if "tech_precision" in m:
        lines.append(f"- Extraction precision: {m['tech_precision']}")
        lines.append(f"- Extraction recall: {m['tech_recall']}")
    lines.append(f"- CVE records retrieved: {m['retrieved']}")
    lines.append(f"- Filtered as relevant: {m['auto_cve']}")
    lines.append(f"- Undecided relevance verdicts: {m['undecided']}")
    lines.append(
        f"- Scenarios: {m['scenarios_total']} generated, "
        f"{m['scenarios_accepted']} accepted, "
        f"{m['scenarios_unjudgeable']} unjudgeable, "
        f"{m['scenarios_failed']} failed"
    )
    lines.append(f"- ASG accuracy: {_fmt_pct(m['asg_accuracy_percent'])}%")
    effort = m["effort"]
    lines.append(
        f"- Estimated manual effort: {effort['manual_minutes']} min; "
        f"automated estimate: {effort['automated_seconds']} s"
    )
    lines.append("")

    lines.append("## Timing")
    lines.append("")
    timing = data.get("timing", {})
    for key, value in timing.items():
        if isinstance(value, dict):
            for stage, seconds in value.items():
                lines.append(f"- {stage}: {seconds}s")
        else:
            lines.append(f"- {key}: {value}")
    lines.append("")
    return "\n".join(lines)


def render_report(report: RunReport | dict, fmt: str = "json") -> bytes:
    """Deterministic rendering of a report as JSON or Markdown bytes."""
    data = report_to_dict(report) if isinstance(report, RunReport) else report
    if fmt == "json":
        return (json.dumps(data, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt == "markdown":
        return render_markdown(data).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def write_atomic(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def mask_timing(data: dict) -> dict:
    """Copy of a report dict with the timing block normalized away,
    for byte-identity comparisons between runs."""
    clone = json.loads(json.dumps(data))
    clone["timing"] = {}
    return clone


# --- Aggregation across devices ----------------------------------------------

def counts_from_report(data: dict) -> DeviceCounts:
    m = data["metrics"]
    tech_counts = {
        f: m["tech_counts"].get(f.abbrev, 0)
        for f in TechnologyFactor
        if m["tech_counts"].get(f.abbrev, 0)
    }
    return DeviceCounts(
        device=data["device_name"],
        retrieved=m["retrieved"],
        auto_cve=m["auto_cve"],
        verified_cve=m["verified_cve"],
        scenarios_total=m["scenarios_total"],
        scenarios_accepted=m["scenarios_accepted"],
        scenarios_unjudgeable=m["scenarios_unjudgeable"],
        tech_counts=tech_counts,
    )


def aggregate_counts(report_dicts: list[dict]) -> CountTable:
    return CountTable(rows=[counts_from_report(d) for d in report_dicts])


def render_aggregate_markdown(table: CountTable) -> str:
    """Multi-device summary table plus column totals and the ASG average."""
    header = ["Device"] + [f.abbrev for f in TechnologyFactor] + [
        "Retrieved", "AutoCVE", "VerifiedCVE", "ASG accuracy (%)",
    ]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table.rows:
        cells = [row.device]
        for f in TechnologyFactor:
            n = row.tech_counts.get(f, 0)
            cells.append(str(n) if n else "-")
        cells.append(str(row.retrieved))
        cells.append(str(row.auto_cve))
        cells.append("-" if row.verified_cve is None else str(row.verified_cve))
        cells.append(_fmt_pct(row.asg_accuracy_percent()))
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append(f"Total technologies: {table.total_tech_entries()}")
    lines.append(f"Total CVE records retrieved: {table.total_retrieved()}")
    lines.append(f"Total filtered as relevant: {table.total_auto_cve()}")
    if any(r.verified_cve is not None for r in table.rows):
        lines.append(f"Total verified: {table.total_verified_cve()}")
    avg = table.average_asg_accuracy()
    if avg is not None:
        lines.append(f"Average ASG accuracy: {avg}%")
    lines.append("")
    return "\n".join(lines)
