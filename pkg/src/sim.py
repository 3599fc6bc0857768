"""Closed-form and Monte-Carlo behaviour of pipelines of stochastic agents.

A stage is either correct or wrong.  The planner is correct with probability
q; each later stage keeps a correct answer unless it harms it (h) and turns a
wrong one into gold with probability r.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import structlog

from src.backends import RoleProfile, StochasticAgentProfile, StochasticBackend
from src.core import (
    DEFAULT_PRICE_SHEET,
    LETTERS,
    Dataset,
    ModelId,
    PipelineConfig,
    PriceSheet,
    Regime,
    StageRole,
    TaskItem,
)
from src.metrics import repair_harm_rates
from src.runner import PipelineRunner
from src.storage import MANIFEST_NAME, TRACE_NAME

logger = structlog.get_logger(__name__)

# simulated runs are stamped with a fixed time so their files are reproducible
SIM_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)
SYNTHETIC_CHOICES = 4
CALIBRATION_JSON = "calibration.json"
CALIBRATION_TEXT = "calibration.txt"


def fixed_clock() -> datetime:
    return SIM_EPOCH


def _check_probabilities(**values: float) -> None:
    for name, value in values.items():
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be within [0, 1], got {value}")


def stage_probabilities(q: float, r_e: float, h_e: float, r_c: float, h_c: float) -> tuple[float, float, float]:
    """Probability that the planner, executor and critic answers are correct."""
    _check_probabilities(q=q, r_e=r_e, h_e=h_e, r_c=r_c, h_c=h_c)
    p_exec = q * (1 - h_e) + (1 - q) * r_e
    p_final = p_exec * (1 - h_c) + (1 - p_exec) * r_c
    return q, p_exec, p_final


def predict_accuracy(q: float, r_e: float, h_e: float, r_c: float, h_c: float) -> float:
    return stage_probabilities(q, r_e, h_e, r_c, h_c)[2]


@dataclass(frozen=True)
class ExpectedRates:
    planner_error: float
    executor_repair_raw: float
    executor_harm_raw: float
    critic_repair_raw: float
    critic_harm_raw: float


def expected_rates(q: float, r_e: float, h_e: float, r_c: float, h_c: float) -> ExpectedRates:
    """Flag frequencies over all items; raw rates weight r and h by eligibility."""
    _, p_exec, _ = stage_probabilities(q, r_e, h_e, r_c, h_c)
    return ExpectedRates(
        planner_error=1 - q,
        executor_repair_raw=(1 - q) * r_e,
        executor_harm_raw=q * h_e,
        critic_repair_raw=(1 - p_exec) * r_c,
        critic_harm_raw=p_exec * h_c,
    )


def synthetic_dataset(n_items: int, seed: int, name: str = "synthetic") -> Dataset:
    """Four-choice items with gold drawn uniformly over the letters."""
    if n_items < 1:
        raise ValueError("n_items must be at least 1")
    rng = np.random.default_rng(seed)
    letters = LETTERS[:SYNTHETIC_CHOICES]
    golds = rng.integers(len(letters), size=n_items)
    items = tuple(
        TaskItem(
            id=f"syn-{i:06d}",
            question=f"Synthetic question {i}",
            choices={letter: f"option {letter.value}" for letter in letters},
            gold=letters[int(g)],
        )
        for i, g in enumerate(golds)
    )
    return Dataset(name=name, items=items)


def chain_profiles(q: float, r_e: float, h_e: float, r_c: float, h_c: float) -> dict[str, StochasticAgentProfile]:
    """Three single-role profiles keyed A (planner), B (executor), C (critic)."""
    _check_probabilities(q=q, r_e=r_e, h_e=h_e, r_c=r_c, h_c=h_c)
    return {
        "A": StochasticAgentProfile(planner=RoleProfile(base_correct=q)),
        "B": StochasticAgentProfile(executor=RoleProfile(repair_prob=r_e, harm_prob=h_e)),
        "C": StochasticAgentProfile(critic=RoleProfile(repair_prob=r_c, harm_prob=h_c)),
    }


@dataclass(frozen=True)
class CalibrationCheck:
    name: str
    measured: float
    expected: float
    n: int
    sigma: float
    deviation_sigma: Optional[float]
    within_3sigma: bool


def binomial_check(name: str, successes: int, n: int, expected: float) -> CalibrationCheck:
    measured = successes / n
    sigma = math.sqrt(expected * (1 - expected) / n)
    if sigma == 0:
        exact = math.isclose(measured, expected, abs_tol=1e-12)
        deviation, within = (0.0 if exact else None), exact
    else:
        deviation = (measured - expected) / sigma
        within = abs(deviation) <= 3
    return CalibrationCheck(
        name=name,
        measured=round(measured, 6),
        expected=round(expected, 6),
        n=n,
        sigma=round(sigma, 6),
        deviation_sigma=None if deviation is None else round(deviation, 3),
        within_3sigma=within,
    )


@dataclass
class CalibrationReport:
    label: str
    seed: int
    n_items: int
    parameters: dict[str, float]
    checks: list[CalibrationCheck] = field(default_factory=list)

    @property
    def all_within(self) -> bool:
        return all(check.within_3sigma for check in self.checks)

    def check(self, name: str) -> CalibrationCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        params = ", ".join(f"{k}={v:g}" for k, v in self.parameters.items())
        lines = [
            f"Calibration of {self.label} over {self.n_items} items (seed {self.seed})",
            f"parameters: {params}",
            "",
            f"{'check':<28} {'measured':>10} {'expected':>10} {'n':>7} {'dev (sigma)':>12}  ok",
        ]
        for c in self.checks:
            dev = "-" if c.deviation_sigma is None else f"{c.deviation_sigma:+.3f}"
            lines.append(
                f"{c.name:<28} {c.measured:>10.4f} {c.expected:>10.4f} {c.n:>7} {dev:>12}  "
                f"{'yes' if c.within_3sigma else 'NO'}"
            )
        lines.append("")
        lines.append("all checks within 3 sigma" if self.all_within else "some checks deviate by more than 3 sigma")
        return "\n".join(lines) + "\n"


def calibrate(
    profiles: Mapping[str, StochasticAgentProfile],
    keys: tuple[str, str, str],
    n_items: int,
    seed: int,
    out_dir: Union[str, Path],
    parallelism: int = 1,
    prices: PriceSheet = DEFAULT_PRICE_SHEET,
    regime: Regime = Regime.ACCOUNTABLE,
    overwrite: bool = False,
) -> CalibrationReport:
    """Run a stochastic pipeline end to end and compare it with the closed form.

    ``keys`` names the planner, executor and critic models in ``profiles``.
    """
    if n_items < 1000:
        logger.warning("small calibration run; 3-sigma bounds are loose", n_items=n_items)
    out_dir = Path(out_dir)
    if overwrite:
        for name in (MANIFEST_NAME, TRACE_NAME, CALIBRATION_JSON, CALIBRATION_TEXT):
            (out_dir / name).unlink(missing_ok=True)

    planner_key, executor_key, critic_key = keys
    q = profiles[planner_key].for_role(StageRole.PLANNER).base_correct
    executor = profiles[executor_key].for_role(StageRole.EXECUTOR)
    critic = profiles[critic_key].for_role(StageRole.CRITIC)
    r_e, h_e = executor.repair_prob, executor.harm_prob
    r_c, h_c = critic.repair_prob, critic.harm_prob

    backends = {key: StochasticBackend(profiles[key], seed=seed, name=f"sim-{key}") for key in set(keys)}
    config = PipelineConfig(
        planner=ModelId(key=planner_key, backend_ref=f"sim-{planner_key}"),
        executor=ModelId(key=executor_key, backend_ref=f"sim-{executor_key}"),
        critic=ModelId(key=critic_key, backend_ref=f"sim-{critic_key}"),
        regime=regime,
    )
    dataset = synthetic_dataset(n_items, seed)
    runner = PipelineRunner(
        backends,
        prices=prices,
        parallelism=parallelism,
        clock=fixed_clock,
        progress=False,
        seed=seed,
    )
    result = runner.run_pipeline(config, dataset, out_dir)
    traces = result.traces
    n = len(traces)

    _, p_exec, p_final = stage_probabilities(q, r_e, h_e, r_c, h_c)
    rates = expected_rates(q, r_e, h_e, r_c, h_c)
    roles = repair_harm_rates(traces)
    ex = roles.row(executor_key, StageRole.EXECUTOR)
    cr = roles.row(critic_key, StageRole.CRITIC)

    checks = [
        binomial_check("final_accuracy", sum(t.is_correct for t in traces), n, p_final),
        binomial_check("planner_error", sum(t.flags.planner_error for t in traces), n, rates.planner_error),
        binomial_check("executor_repair_raw", ex.repair_count, n, rates.executor_repair_raw),
        binomial_check("executor_harm_raw", ex.harm_count, n, rates.executor_harm_raw),
        binomial_check("critic_repair_raw", cr.repair_count, n, rates.critic_repair_raw),
        binomial_check("critic_harm_raw", cr.harm_count, n, rates.critic_harm_raw),
    ]
    conditional = (
        ("executor_repair_conditional", ex.repair_count, ex.repair_eligible, r_e),
        ("executor_harm_conditional", ex.harm_count, ex.harm_eligible, h_e),
        ("critic_repair_conditional", cr.repair_count, cr.repair_eligible, r_c),
        ("critic_harm_conditional", cr.harm_count, cr.harm_eligible, h_c),
    )
    for name, count, eligible, expected in conditional:
        # no eligible case means the rate is undefined; nothing to check
        if eligible:
            checks.append(binomial_check(name, count, eligible, expected))

    report = CalibrationReport(
        label=config.label,
        seed=seed,
        n_items=n,
        parameters={"q": q, "r_e": r_e, "h_e": h_e, "r_c": r_c, "h_c": h_c, "p_exec": round(p_exec, 6)},
        checks=checks,
    )
    (out_dir / CALIBRATION_JSON).write_text(report.to_json(), encoding="utf-8")
    (out_dir / CALIBRATION_TEXT).write_text(report.summary(), encoding="utf-8")
    logger.info("calibration finished", label=config.label, n_items=n, all_within=report.all_within)
    return report
