"""Domain types shared by the pipeline, the blame engine and the reports.

Everything here is an immutable pydantic model; construction validates the
invariants and nothing else happens.  An UNDEFINED answer is ``None``.
"""
import hashlib
import itertools
import json
import re
import string
from datetime import datetime
from decimal import Decimal
from enum import Enum
from typing import Iterable, Iterator, Optional, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    ValidationError,
    field_validator,
    model_validator,
)

from src.errors import ConfigError, DatasetError

TRACE_SCHEMA_VERSION = 1


class AnswerLetter(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"

    def __str__(self) -> str:
        return self.value


LETTERS = tuple(AnswerLetter)

# None stands for UNDEFINED everywhere an answer may be missing
MaybeAnswer = Optional[AnswerLetter]
UNDEFINED: MaybeAnswer = None


class StageRole(str, Enum):
    PLANNER = "Planner"
    EXECUTOR = "Executor"
    CRITIC = "Critic"

    @property
    def position(self) -> int:
        return _STAGE_ORDER.index(self)

    def preceding(self) -> tuple["StageRole", ...]:
        """Roles that run before this one, in pipeline order."""
        return _STAGE_ORDER[: self.position]

    def __lt__(self, other):
        if not isinstance(other, StageRole):
            return NotImplemented
        return self.position < other.position

    def __str__(self) -> str:
        return self.value


_STAGE_ORDER = (StageRole.PLANNER, StageRole.EXECUTOR, StageRole.CRITIC)
PIPELINE_ROLES = _STAGE_ORDER


class Regime(str, Enum):
    BASELINE = "baseline"
    SIMPLE = "simple"
    ACCOUNTABLE = "accountable"

    def __str__(self) -> str:
        return self.value


class ErrorOrigin(str, Enum):
    NONE = "NONE"
    PLANNER = "PLANNER"
    EXECUTOR = "EXECUTOR"
    CRITIC = "CRITIC"

    def __str__(self) -> str:
        return self.value


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --- Answer extraction -------------------------------------------------------

_TRIM_CHARS = string.whitespace + string.punctuation
_ANSWER_MARKER = re.compile(r"answer\s*:\s*\(?\s*([a-e])\b", re.IGNORECASE)


def extract_answer(text: str) -> tuple[MaybeAnswer, Optional[tuple[int, int]]]:
    """Return the parsed letter and the span of ``text`` it was read from."""
    if not isinstance(text, str):
        return UNDEFINED, None

    trimmed = text.strip(_TRIM_CHARS)
    if len(trimmed) == 1 and trimmed.upper() in AnswerLetter.__members__:
        return AnswerLetter(trimmed.upper()), (0, len(text))

    last = None
    for match in _ANSWER_MARKER.finditer(text):
        last = match
    if last is None:
        return UNDEFINED, None
    return AnswerLetter(last.group(1).upper()), last.span()


def parse_answer_letter(text: str) -> MaybeAnswer:
    """Parse a model reply into a letter, or UNDEFINED. Never raises."""
    letter, _ = extract_answer(text)
    return letter


def format_answer(letter: AnswerLetter) -> str:
    return f"Answer: {letter.value}"


# --- Tasks and datasets ------------------------------------------------------


class TaskItem(FrozenModel):
    id: str = Field(min_length=1)
    question: str
    choices: dict[AnswerLetter, str]
    gold: AnswerLetter

    @field_validator("choices")
    @classmethod
    def _order_choices(cls, choices):
        if not 2 <= len(choices) <= 5:
            raise ValueError("an item needs between 2 and 5 choices")
        expected = LETTERS[: len(choices)]
        if set(choices) != set(expected):
            raise ValueError("choice keys must be contiguous from A")
        return {letter: choices[letter] for letter in expected}

    @model_validator(mode="after")
    def _gold_in_choices(self):
        if self.gold not in self.choices:
            raise ValueError(f"gold {self.gold.value} is not one of the item's choices")
        return self

    @property
    def letters(self) -> tuple[AnswerLetter, ...]:
        return tuple(self.choices)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "choices": {k.value: v for k, v in self.choices.items()},
            "gold": self.gold.value,
        }


class Dataset(FrozenModel):
    name: str
    items: tuple[TaskItem, ...]

    @model_validator(mode="after")
    def _check_items(self):
        if not self.items:
            raise ValueError("dataset is empty")
        seen = set()
        for item in self.items:
            if item.id in seen:
                raise ValueError(f"duplicate id {item.id!r}")
            seen.add(item.id)
        return self

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[TaskItem]:
        return iter(self.items)

    @property
    def ids(self) -> set[str]:
        return {item.id for item in self.items}

    def content_hash(self) -> str:
        return hashlib.sha256(dump_dataset(self).encode("utf-8")).hexdigest()


def dump_dataset(dataset: Dataset) -> str:
    """Serialize a dataset in the JSONL file format."""
    return "".join(
        json.dumps(item.to_json(), ensure_ascii=False, sort_keys=True) + "\n"
        for item in dataset.items
    )


def validate_dataset(raw: Union[bytes, str], name: str = "dataset") -> Dataset:
    """Parse a JSONL dataset, reporting the first bad line.

    Blank lines are skipped; unknown fields are ignored.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetError(f"dataset is not valid UTF-8: {exc}") from exc

    items: list[TaskItem] = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON: {exc.msg}", line=line_no) from exc
        if not isinstance(obj, dict):
            raise DatasetError("expected a JSON object", line=line_no)

        missing = [f for f in ("id", "question", "choices", "gold") if f not in obj]
        if missing:
            raise DatasetError(f"missing field(s): {', '.join(missing)}", line=line_no)
        gold = obj["gold"]
        if not isinstance(gold, str) or gold not in AnswerLetter.__members__:
            raise DatasetError(f"gold {gold!r} not in answer space A-E", line=line_no)
        if not isinstance(obj["id"], str) or not obj["id"]:
            raise DatasetError(f"id must be a non-empty string, got {obj['id']!r}", line=line_no)
        if obj["id"] in seen:
            raise DatasetError(
                f"duplicate id {obj['id']!r} (first seen on line {seen[obj['id']]})",
                line=line_no,
            )

        try:
            item = TaskItem(
                id=obj["id"],
                question=obj["question"],
                choices=obj["choices"],
                gold=gold,
            )
        except ValidationError as exc:
            reason = "; ".join(err["msg"] for err in exc.errors())
            raise DatasetError(reason, line=line_no) from exc
        seen[item.id] = line_no
        items.append(item)

    if not items:
        raise DatasetError("dataset is empty")
    return Dataset(name=name, items=tuple(items))


# --- Models and pipeline configurations --------------------------------------


class ModelId(FrozenModel):
    key: str = Field(min_length=1)
    display_name: str = ""
    backend_ref: str = Field(min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _default_display_name(cls, data):
        if isinstance(data, dict) and not data.get("display_name"):
            data = {**data, "display_name": data.get("key", "")}
        return data


class PipelineConfig(FrozenModel):
    planner: ModelId
    executor: ModelId
    critic: ModelId
    regime: Regime
    label: str = ""

    @model_validator(mode="before")
    @classmethod
    def _derive_label(cls, data):
        if isinstance(data, dict) and not data.get("label"):
            keys = []
            for role in ("planner", "executor", "critic"):
                model = data.get(role)
                keys.append(model.key if isinstance(model, ModelId) else (model or {}).get("key", ""))
            data = {**data, "label": "".join(keys)}
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.regime == Regime.BASELINE:
            raise ValueError("a pipeline configuration needs the simple or accountable regime")
        expected = self.planner.key + self.executor.key + self.critic.key
        if self.label != expected:
            raise ValueError(f"label {self.label!r} does not match model keys {expected!r}")
        return self

    def model_for(self, role: StageRole) -> ModelId:
        return {
            StageRole.PLANNER: self.planner,
            StageRole.EXECUTOR: self.executor,
            StageRole.CRITIC: self.critic,
        }[role]

    @property
    def models(self) -> tuple[ModelId, ModelId, ModelId]:
        return (self.planner, self.executor, self.critic)


def enumerate_configs(models: Iterable[ModelId], regime: Regime) -> list[PipelineConfig]:
    """Every ordered planner/executor/critic triple over ``models``."""
    models = list(models)
    return [
        PipelineConfig(planner=p, executor=e, critic=c, regime=regime)
        for p, e, c in itertools.product(models, repeat=3)
    ]


# --- Usage and prices --------------------------------------------------------


class TokenUsage(FrozenModel):
    prompt_tokens: NonNegativeInt = 0
    completion_tokens: NonNegativeInt = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
        )


class PriceRow(FrozenModel):
    """USD per 1,000 tokens."""

    input_rate: Decimal = Field(gt=0)
    output_rate: Decimal = Field(gt=0)

    @field_validator("input_rate", "output_rate", mode="before")
    @classmethod
    def _no_binary_floats(cls, value):
        # TOML/JSON floats go through their shortest repr, not their binary value
        if isinstance(value, float):
            return Decimal(repr(value))
        return value


class PriceSheet(FrozenModel):
    rows: dict[str, PriceRow]

    def row(self, model_key: str) -> PriceRow:
        try:
            return self.rows[model_key]
        except KeyError:
            raise ConfigError(f"no price row for model {model_key!r}") from None

    def content_hash(self) -> str:
        canonical = json.dumps(
            {k: [str(r.input_rate), str(r.output_rate)] for k, r in sorted(self.rows.items())}
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Published per-1K-token prices for the three reference models
DEFAULT_PRICE_SHEET = PriceSheet(
    rows={
        "A": PriceRow(input_rate=Decimal("0.005"), output_rate=Decimal("0.020")),
        "B": PriceRow(input_rate=Decimal("0.003"), output_rate=Decimal("0.015")),
        "C": PriceRow(input_rate=Decimal("0.00125"), output_rate=Decimal("0.010")),
    }
)


# --- Blame results and traces ------------------------------------------------


class BlameFlags(FrozenModel):
    planner_error: bool = False
    executor_repair: bool = False
    executor_harm: bool = False
    critic_repair: bool = False
    critic_harm: bool = False

    @model_validator(mode="after")
    def _exclusive(self):
        if self.executor_repair and self.executor_harm:
            raise ValueError("executor cannot both repair and harm")
        if self.critic_repair and self.critic_harm:
            raise ValueError("critic cannot both repair and harm")
        if self.executor_repair and not self.planner_error:
            raise ValueError("executor repair requires a planner error")
        return self


class StageRecord(FrozenModel):
    role: StageRole
    model: str
    prompt_sha256: str = ""
    raw_output: str = ""
    answer: MaybeAnswer = None
    # None means the provider did not report usage
    usage: Optional[TokenUsage] = None
    latency: float = Field(default=0.0, ge=0)
    cost: Optional[Decimal] = None
    attempts: int = 1
    error: Optional[str] = None


class TraceRecord(FrozenModel):
    schema_version: int = TRACE_SCHEMA_VERSION
    task_id: str
    dataset: str
    label: str
    regime: Regime
    gold: AnswerLetter
    stages: dict[StageRole, StageRecord]
    final: MaybeAnswer
    flags: BlameFlags
    origin: ErrorOrigin
    started_at: datetime
    finished_at: datetime

    @model_validator(mode="after")
    def _check(self):
        from src.blame import select_final

        expected_roles = {StageRole.PLANNER} if self.regime == Regime.BASELINE else set(PIPELINE_ROLES)
        if set(self.stages) != expected_roles:
            raise ValueError(f"{self.regime.value} traces need stages {sorted(r.value for r in expected_roles)}")
        for role, stage in self.stages.items():
            if stage.role != role:
                raise ValueError(f"stage record under {role.value} is labelled {stage.role.value}")
        if self.final != select_final(*self.stage_answers):
            raise ValueError("final answer does not follow the stage preference order")
        if (self.origin == ErrorOrigin.NONE) != (self.final == self.gold):
            raise ValueError("origin must be NONE exactly when the final answer is correct")
        return self

    @property
    def is_correct(self) -> bool:
        return self.final is not None and self.final == self.gold

    @property
    def stage_answers(self) -> tuple[MaybeAnswer, MaybeAnswer, MaybeAnswer]:
        """(P, E, C); a baseline trace repeats its single answer."""
        if self.regime == Regime.BASELINE:
            p = self.stages[StageRole.PLANNER].answer
            return (p, p, p)
        return tuple(self.stages[r].answer for r in PIPELINE_ROLES)

    @property
    def latency(self) -> float:
        return sum(stage.latency for stage in self.stages.values())

    @property
    def has_errors(self) -> bool:
        return any(stage.error for stage in self.stages.values())

    def model_for(self, role: StageRole) -> Optional[str]:
        stage = self.stages.get(role)
        return stage.model if stage else None

    def to_line(self) -> str:
        return json.dumps(self.model_dump(mode="json"), ensure_ascii=False, sort_keys=True)
