"""Aggregate statistics over trace records.

Money is ``Decimal`` throughout, percentages are rounded half-up to two
decimals, and medians take the lower middle element for even counts.
"""
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Optional, Sequence, Union

from src.core import (
    ErrorOrigin,
    PriceRow,
    PriceSheet,
    Regime,
    StageRole,
    TokenUsage,
    TraceRecord,
)
from src.errors import MetricsError

CENT = Decimal("0.01")
MICRO_USD = Decimal("0.000001")


def percent(count: int, total: int) -> Decimal:
    if total <= 0:
        raise MetricsError("percentage of an empty population")
    return (Decimal(100 * count) / Decimal(total)).quantize(CENT, rounding=ROUND_HALF_UP)


def round_usd(amount: Decimal) -> Decimal:
    return amount.quantize(MICRO_USD, rounding=ROUND_HALF_UP)


def to_micro_usd(amount: Decimal) -> int:
    return int((amount * 1_000_000).to_integral_value(rounding=ROUND_HALF_UP))


def median_low(values: Iterable):
    values = list(values)
    if not values:
        return None
    return statistics.median_low(values)


# --- Cost --------------------------------------------------------------------


def stage_cost(usage: TokenUsage, rates: PriceRow) -> Decimal:
    """prompt/1000 * input_rate + completion/1000 * output_rate, exactly."""
    return (
        Decimal(usage.prompt_tokens) * rates.input_rate
        + Decimal(usage.completion_tokens) * rates.output_rate
    ).scaleb(-3)


def pipeline_cost(trace: TraceRecord, prices: Optional[PriceSheet] = None) -> Optional[Decimal]:
    """Sum of the stage costs, or None when any stage lacks usage.

    With ``prices`` the stage costs are recomputed from token usage instead of
    taken from the trace.
    """
    total = Decimal(0)
    for stage in trace.stages.values():
        if stage.usage is None:
            return None
        if prices is not None:
            total += stage_cost(stage.usage, prices.row(stage.model))
        elif stage.cost is None:
            return None
        else:
            total += stage.cost
    return total


def accuracy(traces: Sequence[TraceRecord]) -> Decimal:
    """Share of traces whose final answer is gold; UNDEFINED counts as wrong."""
    traces = list(traces)
    if not traces:
        raise MetricsError("accuracy of an empty trace set")
    return percent(sum(1 for t in traces if t.is_correct), len(traces))


# --- Planner errors ----------------------------------------------------------


@dataclass(frozen=True)
class PlannerErrorRow:
    model: str
    dataset: str
    total_cases: int
    errors: int
    rate: Decimal


def _pipeline_only(traces: Iterable[TraceRecord]) -> list[TraceRecord]:
    return [t for t in traces if t.regime != Regime.BASELINE]


def planner_error_rate(
    traces: Iterable[TraceRecord],
    dataset_sizes: Union[int, Mapping[str, int]],
) -> list[PlannerErrorRow]:
    """Planner error rate per (planner model, dataset).

    Total cases are the dataset size times the number of configurations the
    model planned for, so a model planning two configurations over 263 items
    has 526 cases.
    """
    configs: dict[tuple[str, str], set] = defaultdict(set)
    errors: Counter = Counter()
    for trace in _pipeline_only(traces):
        key = (trace.model_for(StageRole.PLANNER), trace.dataset)
        configs[key].add((trace.label, trace.regime))
        if trace.flags.planner_error:
            errors[key] += 1

    rows = []
    for (model, dataset), seen in sorted(configs.items()):
        size = dataset_sizes if isinstance(dataset_sizes, int) else dataset_sizes[dataset]
        total = size * len(seen)
        count = errors[(model, dataset)]
        rows.append(PlannerErrorRow(model, dataset, total, count, percent(count, total) if total else Decimal(0)))
    return rows


# --- Repair and harm ---------------------------------------------------------


@dataclass(frozen=True)
class RoleBehaviorRow:
    model: str
    role: StageRole
    total_cases: int
    repair_count: int
    harm_count: int
    noop_count: int
    repair_eligible: int
    harm_eligible: int
    repair_rate_raw: Decimal
    harm_rate_raw: Decimal
    # None when no case was eligible
    repair_rate_conditional: Optional[Decimal]
    harm_rate_conditional: Optional[Decimal]

    @property
    def net_repair(self) -> Decimal:
        return self.repair_rate_raw - self.harm_rate_raw


@dataclass
class RoleBehaviorReport:
    rows: list[RoleBehaviorRow] = field(default_factory=list)

    def row(self, model: str, role: StageRole) -> Optional[RoleBehaviorRow]:
        for row in self.rows:
            if row.model == model and row.role == role:
                return row
        return None

    def for_role(self, role: StageRole) -> list[RoleBehaviorRow]:
        return [row for row in self.rows if row.role == role]


def repair_harm_rates(traces: Iterable[TraceRecord]) -> RoleBehaviorReport:
    """Repair/harm counts and rates for every (model, Executor|Critic) pair.

    Raw rates divide by all cases the model held the role; conditional rates
    divide by eligible cases (upstream wrong for repair, right for harm).
    """
    counts: dict[tuple[str, StageRole], Counter] = defaultdict(Counter)
    for trace in _pipeline_only(traces):
        p, e, _ = trace.stage_answers
        flags = trace.flags
        per_role = (
            (StageRole.EXECUTOR, p, flags.executor_repair, flags.executor_harm),
            (StageRole.CRITIC, e, flags.critic_repair, flags.critic_harm),
        )
        for role, upstream, repaired, harmed in per_role:
            c = counts[(trace.model_for(role), role)]
            c["total"] += 1
            upstream_ok = upstream is not None and upstream == trace.gold
            c["harm_eligible" if upstream_ok else "repair_eligible"] += 1
            c["repair"] += repaired
            c["harm"] += harmed

    report = RoleBehaviorReport()
    for (model, role), c in sorted(counts.items(), key=lambda kv: (kv[0][0], kv[0][1].position)):
        total = c["total"]
        report.rows.append(
            RoleBehaviorRow(
                model=model,
                role=role,
                total_cases=total,
                repair_count=c["repair"],
                harm_count=c["harm"],
                noop_count=total - c["repair"] - c["harm"],
                repair_eligible=c["repair_eligible"],
                harm_eligible=c["harm_eligible"],
                repair_rate_raw=percent(c["repair"], total),
                harm_rate_raw=percent(c["harm"], total),
                repair_rate_conditional=percent(c["repair"], c["repair_eligible"]) if c["repair_eligible"] else None,
                harm_rate_conditional=percent(c["harm"], c["harm_eligible"]) if c["harm_eligible"] else None,
            )
        )
    return report


# --- Cost, token and latency summaries ---------------------------------------


@dataclass(frozen=True)
class CostRow:
    scope: str
    dataset: str
    regime: str
    calls: int
    cost_available: int
    total_input_tokens: int
    total_output_tokens: int
    total_cost: Decimal
    median_cost_per_prompt: Optional[Decimal]
    median_latency: Optional[float]
    median_prompt_tokens: Optional[int]
    median_completion_tokens: Optional[int]


@dataclass
class CostReport:
    by_model: list[CostRow] = field(default_factory=list)
    by_run: list[CostRow] = field(default_factory=list)

    def run(self, dataset: str, label: str, regime: str) -> Optional[CostRow]:
        for row in self.by_run:
            if (row.dataset, row.scope, row.regime) == (dataset, label, regime):
                return row
        return None


def cost_by_model(traces: Iterable[TraceRecord], prices: PriceSheet) -> list[CostRow]:
    """Per model and dataset, over every stage call the model served."""
    calls = defaultdict(list)
    for trace in traces:
        for stage in trace.stages.values():
            calls[(stage.model, trace.dataset)].append(stage)

    rows = []
    for (model, dataset), stages in sorted(calls.items()):
        usages = [s.usage for s in stages if s.usage is not None]
        totals = sum(usages, TokenUsage())
        rates = prices.row(model)
        rows.append(
            CostRow(
                scope=model,
                dataset=dataset,
                regime="",
                calls=len(stages),
                cost_available=len(usages),
                total_input_tokens=totals.prompt_tokens,
                total_output_tokens=totals.completion_tokens,
                total_cost=stage_cost(totals, rates),
                median_cost_per_prompt=median_low(stage_cost(u, rates) for u in usages),
                median_latency=median_low(s.latency for s in stages if s.error is None),
                median_prompt_tokens=median_low(u.prompt_tokens for u in usages),
                median_completion_tokens=median_low(u.completion_tokens for u in usages),
            )
        )
    return rows


def cost_by_run(traces: Iterable[TraceRecord], prices: PriceSheet) -> list[CostRow]:
    """Per (dataset, config, regime), item-level: pipeline cost, end-to-end latency."""
    runs = defaultdict(list)
    for trace in traces:
        runs[(trace.dataset, trace.label, trace.regime.value)].append(trace)

    rows = []
    for (dataset, label, regime), group in sorted(runs.items()):
        per_model = cost_by_model(group, prices)
        item_costs = [c for c in (pipeline_cost(t, prices) for t in group) if c is not None]
        item_usage = [
            sum((s.usage for s in t.stages.values()), TokenUsage())
            for t in group
            if all(s.usage is not None for s in t.stages.values())
        ]
        rows.append(
            CostRow(
                scope=label,
                dataset=dataset,
                regime=regime,
                calls=len(group),
                cost_available=len(item_costs),
                total_input_tokens=sum(r.total_input_tokens for r in per_model),
                total_output_tokens=sum(r.total_output_tokens for r in per_model),
                total_cost=sum((r.total_cost for r in per_model), Decimal(0)),
                median_cost_per_prompt=median_low(item_costs),
                median_latency=median_low(t.latency for t in group),
                median_prompt_tokens=median_low(u.prompt_tokens for u in item_usage),
                median_completion_tokens=median_low(u.completion_tokens for u in item_usage),
            )
        )
    return rows


def cost_report(traces: Iterable[TraceRecord], prices: PriceSheet) -> CostReport:
    traces = list(traces)
    return CostReport(by_model=cost_by_model(traces, prices), by_run=cost_by_run(traces, prices))


def overhead(baseline: CostRow, pipeline: CostRow) -> tuple[Optional[Decimal], Optional[float]]:
    """How many times more a pipeline costs and waits than a baseline (median)."""
    cost_ratio = None
    if baseline.median_cost_per_prompt and pipeline.median_cost_per_prompt is not None:
        cost_ratio = (pipeline.median_cost_per_prompt / baseline.median_cost_per_prompt).quantize(CENT)
    latency_ratio = None
    if baseline.median_latency and pipeline.median_latency is not None:
        latency_ratio = round(pipeline.median_latency / baseline.median_latency, 2)
    return cost_ratio, latency_ratio


# --- Configuration summaries -------------------------------------------------


@dataclass(frozen=True)
class ConfigSummary:
    dataset: str
    label: str
    regime: str
    items: int
    accuracy: Decimal
    median_cost: Optional[Decimal]
    median_latency: Optional[float]


def summarize_configs(traces: Iterable[TraceRecord], prices: PriceSheet) -> list[ConfigSummary]:
    groups = defaultdict(list)
    for trace in traces:
        groups[(trace.dataset, trace.label, trace.regime.value)].append(trace)
    summaries = []
    for (dataset, label, regime), group in sorted(groups.items()):
        costs = [c for c in (pipeline_cost(t, prices) for t in group) if c is not None]
        summaries.append(
            ConfigSummary(
                dataset=dataset,
                label=label,
                regime=regime,
                items=len(group),
                accuracy=accuracy(group),
                median_cost=median_low(costs),
                median_latency=median_low(t.latency for t in group),
            )
        )
    return summaries


@dataclass(frozen=True)
class DeltaRow:
    dataset: str
    label: str
    simple: Decimal
    accountable: Decimal

    @property
    def delta(self) -> Decimal:
        return self.accountable - self.simple


def regime_deltas(summaries: Iterable[ConfigSummary]) -> list[DeltaRow]:
    """Pair simple and accountable accuracy for every configuration run under both."""
    by_key = defaultdict(dict)
    for s in summaries:
        by_key[(s.dataset, s.label)][s.regime] = s.accuracy
    return [
        DeltaRow(dataset, label, acc[Regime.SIMPLE.value], acc[Regime.ACCOUNTABLE.value])
        for (dataset, label), acc in sorted(by_key.items())
        if Regime.SIMPLE.value in acc and Regime.ACCOUNTABLE.value in acc
    ]


def origin_distribution(traces: Iterable[TraceRecord]) -> dict[tuple[str, str, str], Counter]:
    """Error-origin counts per (dataset, config, regime)."""
    counts: dict[tuple[str, str, str], Counter] = defaultdict(Counter)
    for trace in traces:
        counts[(trace.dataset, trace.label, trace.regime.value)][trace.origin] += 1
    for counter in counts.values():
        for origin in ErrorOrigin:
            counter.setdefault(origin, 0)
    return dict(sorted(counts.items()))


@dataclass(frozen=True)
class Casting:
    planner: Optional[str]
    executor: Optional[str]
    critic: Optional[str]

    @property
    def label(self) -> str:
        return "".join(k or "?" for k in (self.planner, self.executor, self.critic))


def recommend_casting(planner_rows: Sequence[PlannerErrorRow], roles: RoleBehaviorReport) -> Casting:
    """Lowest planner error rate; highest net repair (repair - harm) mid-stream."""
    errors: Counter = Counter()
    cases: Counter = Counter()
    for row in planner_rows:
        errors[row.model] += row.errors
        cases[row.model] += row.total_cases
    planner = None
    if cases:
        planner = min(cases, key=lambda m: (Decimal(errors[m]) / cases[m], m))

    def best(role: StageRole) -> Optional[str]:
        rows = roles.for_role(role)
        if not rows:
            return None
        return min(rows, key=lambda r: (-r.net_repair, r.harm_rate_raw, r.model)).model

    return Casting(planner, best(StageRole.EXECUTOR), best(StageRole.CRITIC))
