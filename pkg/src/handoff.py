"""Prompts passed between pipeline stages.

The simple regime forwards only the question and the current answer letter.
The accountable regime forwards validated ``StageArtifact`` envelopes rendered
into a plain-text state block.
"""
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from pydantic import Field, model_validator

from src.core import (
    FrozenModel,
    MaybeAnswer,
    ModelId,
    StageRole,
    TaskItem,
    extract_answer,
)
from src.errors import HandoffError

ARTIFACT_SCHEMA_VERSION = 1
TEMPLATE_DIR = Path(__file__).parent / "templates"
TEMPLATE_NAMES = ("simple", "planner", "executor", "critic")

NO_PREVIOUS_ANSWER = "The previous stage produced no valid answer."
FORMAT_REMINDER = (
    "Your previous reply did not follow the required format. "
    'Reply again and end with a final line of the form "Answer: <letter>".'
)

_PLACEHOLDER = re.compile(r"\{(question|choices|state_block|previous_answer)\}")


class StageArtifact(FrozenModel):
    task_id: str
    stage: StageRole
    producer: ModelId
    answer: MaybeAnswer = None
    rationale: str = ""
    upstream_answers: tuple[tuple[StageRole, MaybeAnswer], ...] = ()
    schema_version: int = Field(default=ARTIFACT_SCHEMA_VERSION)

    @model_validator(mode="after")
    def _check_upstream(self):
        roles = tuple(role for role, _ in self.upstream_answers)
        if roles != self.stage.preceding():
            raise ValueError(
                f"{self.stage.value} artifact needs upstream {[r.value for r in self.stage.preceding()]}, "
                f"got {[r.value for r in roles]}"
            )
        return self


@dataclass(frozen=True)
class PromptTemplates:
    simple: str
    planner: str
    executor: str
    critic: str

    def for_role(self, role: StageRole) -> str:
        return getattr(self, role.value.lower())


def load_templates(directory: Optional[Union[str, Path]] = None) -> PromptTemplates:
    """Read the prompt templates, letting files in ``directory`` override the defaults."""
    texts = {}
    for name in TEMPLATE_NAMES:
        path = TEMPLATE_DIR / f"{name}.txt"
        if directory is not None and (Path(directory) / f"{name}.txt").exists():
            path = Path(directory) / f"{name}.txt"
        texts[name] = path.read_text(encoding="utf-8")
    return PromptTemplates(**texts)


DEFAULT_TEMPLATES = load_templates()


def _render(template: str, **values: str) -> str:
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


def render_choices(item: TaskItem) -> str:
    return "\n".join(f"{letter.value}. {text}" for letter, text in item.choices.items())


def _describe(answer: MaybeAnswer) -> str:
    return answer.value if answer is not None else "UNDEFINED"


def render_state_block(upstream: Sequence[StageArtifact]) -> str:
    lines = [f"BEGIN STATE (schema_version={ARTIFACT_SCHEMA_VERSION})"]
    if not upstream:
        lines.append("(no upstream artifacts)")
    for artifact in upstream:
        lines.append(f"stage: {artifact.stage.value}")
        lines.append(f"producer: {artifact.producer.key}")
        lines.append(f"answer: {_describe(artifact.answer)}")
        lines.append("rationale:")
        rationale = artifact.rationale.strip()
        lines.extend(f"  {row}" for row in rationale.splitlines() or ["(none)"])
        lines.append("---")
    lines.append("END STATE")
    return "\n".join(lines)


def build_simple_handoff(
    item: TaskItem,
    prior: Optional[StageArtifact] = None,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> str:
    """Question, choices and, if there is one, the previous stage's letter."""
    if prior is None:
        previous = ""
    elif prior.answer is None:
        previous = NO_PREVIOUS_ANSWER
    else:
        previous = f"Previous answer: {prior.answer.value}"
    return _render(
        templates.simple,
        question=item.question,
        choices=render_choices(item),
        previous_answer=previous,
    )


def build_accountable_handoff(
    item: TaskItem,
    role: StageRole,
    upstream: Sequence[StageArtifact],
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> str:
    if len(upstream) != role.position:
        raise HandoffError(
            f"upstream length mismatch: {role.value} expects {role.position} artifact(s), got {len(upstream)}"
        )
    stages = tuple(a.stage for a in upstream)
    if stages != role.preceding():
        raise HandoffError(f"upstream artifacts out of order for {role.value}: {[s.value for s in stages]}")
    return _render(
        templates.for_role(role),
        question=item.question,
        choices=render_choices(item),
        state_block=render_state_block(upstream),
    )


def with_format_reminder(prompt: str) -> str:
    return f"{prompt.rstrip()}\n\n{FORMAT_REMINDER}\n"


def validate_artifact(
    raw_output: str,
    task_id: str,
    stage: StageRole,
    producer: ModelId,
    upstream: Sequence[StageArtifact] = (),
) -> StageArtifact:
    """Wrap a stage's raw reply into an artifact.

    An unparseable reply still yields an artifact, with an UNDEFINED answer and
    the whole reply kept as rationale.
    """
    raw_output = raw_output or ""
    answer, span = extract_answer(raw_output)
    if span is None:
        rationale = raw_output
    else:
        rationale = raw_output[: span[0]] + raw_output[span[1]:]
    try:
        return StageArtifact(
            task_id=task_id,
            stage=stage,
            producer=producer,
            answer=answer,
            rationale=rationale,
            upstream_answers=tuple((a.stage, a.answer) for a in upstream),
        )
    except ValueError as exc:
        raise HandoffError(str(exc)) from exc
