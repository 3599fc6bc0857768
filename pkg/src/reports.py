"""Render metric results as CSV files and one Markdown report."""
import csv
import io
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import structlog

from src.core import ErrorOrigin, PriceSheet, Regime, TraceRecord
from src.metrics import (
    Casting,
    ConfigSummary,
    CostReport,
    CostRow,
    DeltaRow,
    PlannerErrorRow,
    RoleBehaviorReport,
    cost_report,
    origin_distribution,
    overhead,
    planner_error_rate,
    recommend_casting,
    regime_deltas,
    repair_harm_rates,
    round_usd,
    summarize_configs,
)

logger = structlog.get_logger(__name__)

CONFIGS_TABLE = "configs"
MARKDOWN_NAME = "report.md"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def _usd(value):
    return None if value is None else round_usd(value)


@dataclass
class Table:
    name: str
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(v) for v in row])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"## {self.title}", ""]
        if not self.rows:
            return "\n".join(lines + ["_no data_", ""])
        lines.append("| " + " | ".join(self.columns) + " |")
        lines.append("|" + "|".join("---" for _ in self.columns) + "|")
        for row in self.rows:
            lines.append("| " + " | ".join(_cell(v) or "n/a" for v in row) + " |")
        lines.append("")
        return "\n".join(lines)


def configs_table(summaries: Sequence[ConfigSummary]) -> Table:
    """Every (dataset, configuration, regime); this is the Pareto input."""
    table = Table(
        CONFIGS_TABLE,
        "Accuracy, cost and latency per configuration",
        ["dataset", "label", "regime", "items", "accuracy", "median_cost", "median_latency"],
    )
    for s in summaries:
        table.rows.append([s.dataset, s.label, s.regime, s.items, s.accuracy, _usd(s.median_cost), s.median_latency])
    return table


def baseline_table(summaries: Sequence[ConfigSummary]) -> Table:
    table = Table("baseline", "Single-model baseline accuracy", ["dataset", "model", "accuracy", "items"])
    for s in summaries:
        if s.regime == Regime.BASELINE.value:
            table.rows.append([s.dataset, s.label, s.accuracy, s.items])
    return table


def delta_table(deltas: Sequence[DeltaRow]) -> Table:
    table = Table(
        "regime_delta",
        "Simple vs accountable pipeline accuracy",
        ["dataset", "label", "simple", "accountable", "delta"],
    )
    for d in deltas:
        table.rows.append([d.dataset, d.label, d.simple, d.accountable, d.delta])
    return table


def planner_error_table(rows: Sequence[PlannerErrorRow]) -> Table:
    table = Table(
        "planner_errors",
        "Planner error rate",
        ["model", "dataset", "total_cases", "planner_errors", "rate"],
    )
    for r in rows:
        table.rows.append([r.model, r.dataset, r.total_cases, r.errors, r.rate])
    return table


def role_behavior_table(report: RoleBehaviorReport) -> Table:
    table = Table(
        "repair_harm",
        "Repair and harm rates of executors and critics",
        [
            "model", "role", "total_cases", "repairs", "harms", "noops",
            "repair_rate", "harm_rate", "repair_rate_conditional", "harm_rate_conditional",
        ],
    )
    for r in report.rows:
        table.rows.append([
            r.model, r.role.value, r.total_cases, r.repair_count, r.harm_count, r.noop_count,
            r.repair_rate_raw, r.harm_rate_raw, r.repair_rate_conditional, r.harm_rate_conditional,
        ])
    return table


def _cost_rows(table: Table, rows: Iterable[CostRow]) -> Table:
    for r in rows:
        table.rows.append([
            r.scope, r.dataset, r.regime, r.calls, r.cost_available,
            r.total_input_tokens, r.total_output_tokens, _usd(r.total_cost),
            _usd(r.median_cost_per_prompt), r.median_latency,
            r.median_prompt_tokens, r.median_completion_tokens,
        ])
    return table


COST_COLUMNS = [
    "scope", "dataset", "regime", "calls", "priced", "input_tokens", "output_tokens",
    "total_cost", "median_cost", "median_latency", "median_prompt_tokens", "median_completion_tokens",
]


def cost_tables(report: CostReport) -> list[Table]:
    by_model = _cost_rows(Table("cost_by_model", "Cost and tokens per model", list(COST_COLUMNS)), report.by_model)
    by_run = _cost_rows(Table("cost_by_run", "Cost, tokens and latency per run", list(COST_COLUMNS)), report.by_run)
    return [by_model, by_run]


def overhead_table(report: CostReport) -> Table:
    """Each pipeline run against each baseline run on the same dataset."""
    table = Table(
        "overhead",
        "Pipeline overhead over single-model baselines",
        ["dataset", "pipeline", "regime", "baseline", "cost_ratio", "latency_ratio"],
    )
    baselines = [r for r in report.by_run if r.regime == Regime.BASELINE.value]
    for run in report.by_run:
        if run.regime == Regime.BASELINE.value:
            continue
        for base in baselines:
            if base.dataset != run.dataset:
                continue
            cost_ratio, latency_ratio = overhead(base, run)
            table.rows.append([run.dataset, run.scope, run.regime, base.scope, cost_ratio, latency_ratio])
    return table


def origin_table(traces: Iterable[TraceRecord]) -> Table:
    origins = list(ErrorOrigin)
    table = Table(
        "origins",
        "Error origin per configuration",
        ["dataset", "label", "regime"] + [o.value.lower() for o in origins],
    )
    for (dataset, label, regime), counts in origin_distribution(traces).items():
        table.rows.append([dataset, label, regime] + [counts[o] for o in origins])
    return table


def casting_table(casting: Casting) -> Table:
    table = Table("casting", "Recommended role casting", ["planner", "executor", "critic", "label"])
    table.rows.append([casting.planner, casting.executor, casting.critic, casting.label])
    return table


def build_report(
    traces: Sequence[TraceRecord],
    prices: PriceSheet,
    dataset_sizes: Mapping[str, int],
) -> list[Table]:
    traces = list(traces)
    summaries = summarize_configs(traces, prices)
    planner_rows = planner_error_rate(traces, dataset_sizes)
    roles = repair_harm_rates(traces)
    costs = cost_report(traces, prices)
    return [
        baseline_table(summaries),
        configs_table(summaries),
        delta_table(regime_deltas(summaries)),
        planner_error_table(planner_rows),
        role_behavior_table(roles),
        origin_table(traces),
        *cost_tables(costs),
        overhead_table(costs),
        casting_table(recommend_casting(planner_rows, roles)),
    ]


def write_report(out_dir: Union[str, Path], tables: Sequence[Table]) -> Path:
    """One CSV per table plus ``report.md`` holding all of them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for table in tables:
        (out_dir / f"{table.name}.csv").write_text(table.to_csv(), encoding="utf-8")
    markdown = "# Pipeline report\n\n" + "\n".join(t.to_markdown() for t in tables)
    path = out_dir / MARKDOWN_NAME
    path.write_text(markdown, encoding="utf-8")
    logger.info("report written", out_dir=str(out_dir), tables=len(tables))
    return path
