"""Builders for items, datasets and traces shared by the test modules."""
from datetime import datetime, timezone
from decimal import Decimal
from typing import Optional

from src.blame import assign_blame
from src.core import (
    PIPELINE_ROLES,
    AnswerLetter,
    Dataset,
    ModelId,
    Regime,
    StageRecord,
    StageRole,
    TaskItem,
    TokenUsage,
    TraceRecord,
)

T0 = datetime(2025, 1, 1, tzinfo=timezone.utc)


def letter(value: Optional[str]) -> Optional[AnswerLetter]:
    return None if value is None else AnswerLetter(value)


def make_item(item_id: str = "q1", gold: str = "A", n_choices: int = 4) -> TaskItem:
    letters = "ABCDE"[:n_choices]
    return TaskItem(
        id=item_id,
        question=f"Question {item_id}?",
        choices={l: f"choice {l}" for l in letters},
        gold=gold,
    )


def make_dataset(n: int = 3, name: str = "toy", golds: str = "ABCD") -> Dataset:
    return Dataset(
        name=name,
        items=tuple(make_item(f"q{i}", golds[i % len(golds)]) for i in range(n)),
    )


def model(key: str) -> ModelId:
    return ModelId(key=key, backend_ref=f"backend-{key}")


def stage(
    role: StageRole,
    model_key: str,
    answer: Optional[str],
    usage: Optional[tuple[int, int]] = (1000, 100),
    latency: float = 1.0,
    cost: Optional[Decimal] = None,
) -> StageRecord:
    return StageRecord(
        role=role,
        model=model_key,
        raw_output="" if answer is None else f"Answer: {answer}",
        answer=letter(answer),
        usage=None if usage is None else TokenUsage(prompt_tokens=usage[0], completion_tokens=usage[1]),
        latency=latency,
        cost=cost,
    )


def make_trace(
    p: Optional[str],
    e: Optional[str] = None,
    c: Optional[str] = None,
    gold: str = "A",
    label: str = "ABC",
    regime: Regime = Regime.ACCOUNTABLE,
    dataset: str = "toy",
    task_id: str = "q1",
    usage: Optional[tuple[int, int]] = (1000, 100),
    latency: float = 1.0,
) -> TraceRecord:
    """A trace whose blame fields follow from the stage answers."""
    if regime == Regime.BASELINE:
        stages = {StageRole.PLANNER: stage(StageRole.PLANNER, label, p, usage, latency)}
        answers = (letter(p),) * 3
    else:
        stages = {
            role: stage(role, key, a, usage, latency)
            for role, key, a in zip(PIPELINE_ROLES, label, (p, e, c))
        }
        answers = (letter(p), letter(e), letter(c))
    blame = assign_blame(*answers, AnswerLetter(gold))
    return TraceRecord(
        task_id=task_id,
        dataset=dataset,
        label=label,
        regime=regime,
        gold=gold,
        stages=stages,
        final=blame.final,
        flags=blame.flags,
        origin=blame.origin,
        started_at=T0,
        finished_at=T0,
    )
