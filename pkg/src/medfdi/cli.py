"""Command-line entry points.

Verbs: ``validate`` (config and control structure), ``analyze`` (the full
pipeline), ``judge`` (re-judge scenarios in an existing report), ``metrics``
(recompute and aggregate from report files), ``cache clear``.

Exit codes: 0 success, 1 fatal configuration error, 2 run completed but some
items failed (undecided verdicts, failed or unjudgeable scenarios).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import judge as judge_mod
from . import metrics as metrics_mod
from . import pipeline, report
from .control_structure import enumerate_injection_points, load_control_structure, validate_structure
from .cve_client import CveCache, record_from_dict
from .errors import ConfigError, MedfdiError
from .llm_gateway import LlmGateway, load_providers
from .scenario_generator import scenario_to_dict

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ITEM_ERRORS = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medfdi",
        description="False-data-injection threat analysis for ML-enabled medical devices",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="run config YAML")
        p.add_argument("--mode", choices=["mock", "live"], help="override llm.mode")
        p.add_argument("--top-n", type=int, help="override cve.top_n")
        p.add_argument("--out", help="override output.dir")
        p.add_argument("--max-cache-age", type=float, help="override cve.max_cache_age (seconds)")
        p.add_argument("--concurrency", type=int, help="override llm.concurrency")

    p_validate = sub.add_parser("validate", help="check the config and control structure")
    add_common(p_validate)

    p_analyze = sub.add_parser("analyze", help="run the full pipeline for one device")
    add_common(p_analyze)

    p_judge = sub.add_parser("judge", help="re-judge scenarios in an existing report")
    add_common(p_judge)
    p_judge.add_argument("--report", required=True, help="existing .report.json file")

    p_metrics = sub.add_parser("metrics", help="recompute metrics from report files")
    p_metrics.add_argument("--reports", nargs="+", required=True, help="one or more .report.json files")

    p_cache = sub.add_parser("cache", help="cache maintenance")
    cache_sub = p_cache.add_subparsers(dest="cache_command", required=True)
    p_clear = cache_sub.add_parser("clear", help="delete cached CVE query results")
    add_common(p_clear)

    return parser


def _load_config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_run_config(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.top_n:
        cfg.top_n = args.top_n
    if args.out:
        cfg.output_dir = Path(args.out).resolve()
    if args.max_cache_age is not None:
        cfg.max_cache_age = args.max_cache_age
    if args.concurrency:
        cfg.concurrency = args.concurrency
    return cfg


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    structure = load_control_structure(cfg.control_structure_path)
    violations = validate_structure(structure)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return EXIT_CONFIG
    print(f"ok: {structure.device_name} "
          f"({len(structure.components)} components, {len(structure.links)} links)")
    for point in enumerate_injection_points(structure):
        print(f"injection point: {point.component} via {' -> '.join(point.path_to_ml)}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    run_report = pipeline.run_pipeline(cfg)
    counts = run_report.counts
    print(f"{run_report.device_name}: {len(run_report.technologies.entries)} technologies, "
          f"{counts.retrieved} CVE records, {counts.auto_cve} relevant, "
          f"{counts.scenarios_total} scenarios ({counts.scenarios_accepted} accepted)")
    print(f"report: {cfg.output_dir / run_report.device_name}.report.json")
    return EXIT_ITEM_ERRORS if pipeline.has_item_errors(run_report) else EXIT_OK


def cmd_judge(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    report_path = Path(args.report)
    data = json.loads(report_path.read_text(encoding="utf-8"))

    providers = load_providers(cfg.providers_path, mode=cfg.mode)
    for model in cfg.judge_models:
        if model not in providers:
            raise ConfigError(f"judge model {model!r} not in provider config")
    judge_providers = (providers[cfg.judge_models[0]], providers[cfg.judge_models[1]])
    gateway = LlmGateway(provider_concurrency=cfg.concurrency)

    records_by_key = {}
    for block in data["retrieval"]:
        for rec in block["records"]:
            records_by_key[(block["keyword"], rec["cve_id"])] = record_from_dict(rec)

    rows = report.scenario_rows_from_dict(data)
    new_rows = []
    for row in rows:
        if row.scenario is None:
            new_rows.append(row)
            continue
        context = judge_mod.JudgeContext(
            system_description=data["context"]["system_description"],
            data_flow=data["context"]["data_flow"],
            cve=records_by_key[(row.keyword, row.cve_id)],
        )
        outcome = judge_mod.judge_scenario(row.scenario, context, gateway, judge_providers)
        if isinstance(outcome, judge_mod.UnjudgeableScenario):
            new_rows.append(report.ScenarioRow(
                factor=row.factor, keyword=row.keyword, cve_id=row.cve_id,
                status=report.SCENARIO_UNJUDGEABLE, scenario=row.scenario,
                failure=f"judge {outcome.judge_model_id} format violation",
            ))
        else:
            status = report.SCENARIO_ACCEPTED if outcome.accepted else report.SCENARIO_REJECTED
            new_rows.append(report.ScenarioRow(
                factor=row.factor, keyword=row.keyword, cve_id=row.cve_id,
                status=status, scenario=row.scenario, judges=outcome.verdicts,
            ))

    data["scenarios"] = [
        {
            "factor": s.factor.display,
            "keyword": s.keyword,
            "cve_id": s.cve_id,
            "status": s.status,
            "accepted": s.accepted,
            "scenario": None if s.scenario is None else scenario_to_dict(s.scenario),
            "judges": [
                {"judge_model_id": j.judge_model_id, "per_step": list(j.per_step), "overall": j.overall}
                for j in s.judges
            ],
            "failure": s.failure,
        }
        for s in new_rows
    ]
    accepted = sum(1 for s in new_rows if s.status == report.SCENARIO_ACCEPTED)
    unjudgeable = sum(1 for s in new_rows if s.status == report.SCENARIO_UNJUDGEABLE)
    m = data["metrics"]
    m["scenarios_accepted"] = accepted
    m["scenarios_unjudgeable"] = unjudgeable
    judged = m["scenarios_total"] - unjudgeable
    m["asg_accuracy_percent"] = (
        metrics_mod.round_percent(accepted / judged) if judged else None
    )

    report.write_atomic(report_path, report.render_report(data, "json"))
    md_path = report_path.with_name(report_path.name.replace(".report.json", ".report.md"))
    report.write_atomic(md_path, report.render_report(data, "markdown"))
    print(f"re-judged {sum(1 for r in new_rows if r.scenario is not None)} scenarios: "
          f"{accepted} accepted, {unjudgeable} unjudgeable")
    failed = any(r.status in (report.SCENARIO_FAILED, report.SCENARIO_UNJUDGEABLE) for r in new_rows)
    return EXIT_ITEM_ERRORS if failed else EXIT_OK


def cmd_metrics(args) -> int:
    dicts = []
    for path in args.reports:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        problems = report.validate_report(data)
        if problems:
            for p in problems:
                print(f"{path}: {p}", file=sys.stderr)
            return EXIT_CONFIG
        dicts.append(data)
    table = report.aggregate_counts(dicts)
    print(report.render_aggregate_markdown(table))
    return EXIT_OK


def cmd_cache_clear(args) -> int:
    cfg = _load_config(args)
    if cfg.cache_dir is None:
        print("no cache directory configured")
        return EXIT_OK
    removed = CveCache(cfg.cache_dir).clear()
    print(f"removed {removed} cached entries")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "judge":
            return cmd_judge(args)
        if args.command == "metrics":
            return cmd_metrics(args)
        if args.command == "cache":
            return cmd_cache_clear(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MedfdiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
