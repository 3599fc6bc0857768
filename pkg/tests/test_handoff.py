import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

import pytest

from src.core import AnswerLetter, StageRole
from src.errors import HandoffError
from src.handoff import (
    FORMAT_REMINDER,
    NO_PREVIOUS_ANSWER,
    build_accountable_handoff,
    build_simple_handoff,
    load_templates,
    render_state_block,
    validate_artifact,
    with_format_reminder,
)
from tests.factories import make_item, model


@pytest.fixture
def item():
    return make_item("q7", gold="B")


def _planner_artifact(text="Plan: compare options.\nAnswer: B"):
    return validate_artifact(text, "q7", StageRole.PLANNER, model("A"))


def test_simple_handoff_first_stage(item):
    prompt = build_simple_handoff(item)
    assert "Question q7?" in prompt
    assert "A. choice A" in prompt
    assert "Previous answer" not in prompt
    assert "Answer: <letter>" not in prompt


def test_simple_handoff_forwards_letter_only(item):
    prior = _planner_artifact("A long rationale that must not leak.\nAnswer: B")
    prompt = build_simple_handoff(item, prior)
    assert "Previous answer: B" in prompt
    assert "must not leak" not in prompt


def test_simple_handoff_undefined_prior(item):
    prior = _planner_artifact("no idea")
    assert prior.answer is None
    assert NO_PREVIOUS_ANSWER in build_simple_handoff(item, prior)


def test_accountable_handoff_carries_state(item):
    planner = _planner_artifact()
    executor = validate_artifact(
        "Checked the plan.\nAnswer: C", "q7", StageRole.EXECUTOR, model("B"), [planner]
    )
    prompt = build_accountable_handoff(item, StageRole.CRITIC, [planner, executor])
    assert "BEGIN STATE (schema_version=1)" in prompt
    assert "stage: Planner" in prompt
    assert "producer: B" in prompt
    assert "answer: C" in prompt
    assert "Checked the plan." in prompt
    assert 'Answer: <letter>' in prompt


def test_accountable_handoff_renders_undefined(item):
    planner = _planner_artifact("I cannot decide.")
    prompt = build_accountable_handoff(item, StageRole.EXECUTOR, [planner])
    assert "answer: UNDEFINED" in prompt


def test_planner_state_block_is_empty(item):
    prompt = build_accountable_handoff(item, StageRole.PLANNER, [])
    assert "(no upstream artifacts)" in prompt


def test_accountable_handoff_length_mismatch(item):
    with pytest.raises(HandoffError, match="upstream length mismatch"):
        build_accountable_handoff(item, StageRole.CRITIC, [_planner_artifact()])


def test_accountable_handoff_out_of_order(item):
    planner = _planner_artifact()
    with pytest.raises(HandoffError, match="out of order"):
        build_accountable_handoff(item, StageRole.CRITIC, [planner, planner])


def test_validate_artifact_strips_answer_line():
    artifact = _planner_artifact("Because B is four.\nAnswer: B")
    assert artifact.answer == AnswerLetter.B
    assert "Answer" not in artifact.rationale
    assert "Because B is four." in artifact.rationale


def test_validate_artifact_requires_upstream():
    with pytest.raises(HandoffError):
        validate_artifact("Answer: A", "q7", StageRole.EXECUTOR, model("B"), [])


def test_state_block_is_deterministic():
    artifacts = [_planner_artifact()]
    assert render_state_block(artifacts) == render_state_block(artifacts)


def test_format_reminder():
    assert with_format_reminder("Prompt\n").endswith(FORMAT_REMINDER + "\n")


def test_load_templates_override(tmp_path, item):
    (tmp_path / "simple.txt").write_text("Q={question}\n{choices}\n{previous_answer}", encoding="utf-8")
    templates = load_templates(tmp_path)
    assert build_simple_handoff(item, None, templates).startswith("Q=Question q7?")
    # files not overridden fall back to the packaged ones
    assert "{state_block}" in templates.planner
