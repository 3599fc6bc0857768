"""Final-answer selection, blame flags and error-origin classification.

UNDEFINED (``None``) answers compare unequal to the gold letter; definedness
only matters when choosing the final answer.
"""
from typing import NamedTuple

from src.core import AnswerLetter, BlameFlags, ErrorOrigin, MaybeAnswer


class BlameResult(NamedTuple):
    flags: BlameFlags
    origin: ErrorOrigin
    final: MaybeAnswer


def select_final(p: MaybeAnswer, e: MaybeAnswer, c: MaybeAnswer) -> MaybeAnswer:
    """Prefer the critic, then the executor, then the planner."""
    if c is not None:
        return c
    if e is not None:
        return e
    return p


def assign_blame(p: MaybeAnswer, e: MaybeAnswer, c: MaybeAnswer, gold: AnswerLetter) -> BlameResult:
    p_ok = p is not None and p == gold
    e_ok = e is not None and e == gold
    c_ok = c is not None and c == gold

    flags = BlameFlags(
        planner_error=not p_ok,
        executor_repair=not p_ok and e_ok,
        executor_harm=p_ok and not e_ok,
        critic_repair=not e_ok and c_ok,
        critic_harm=e_ok and not c_ok,
    )

    final = select_final(p, e, c)
    if final is not None and final == gold:
        origin = ErrorOrigin.NONE
    elif e_ok and not c_ok:
        origin = ErrorOrigin.CRITIC
    elif p_ok and not e_ok:
        origin = ErrorOrigin.EXECUTOR
    else:
        origin = ErrorOrigin.PLANNER
    return BlameResult(flags, origin, final)


def assign_baseline_blame(answer: MaybeAnswer, gold: AnswerLetter) -> BlameResult:
    """A single-model answer seen as a pipeline whose three stages agree."""
    return assign_blame(answer, answer, answer, gold)
