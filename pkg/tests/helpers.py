"""Tiny builders shared across test modules."""

from steplab.trace_model import Problem, ReasoningTrace, render_trace
from steplab.validators import ValidatorSpec


def make_problem(pid="p1", domain="math", question="What is 2+2?", gold="4", validator=None):
    return Problem(
        id=pid,
        domain=domain,
        question=question,
        gold_answer=gold,
        validator_spec=validator or ValidatorSpec(kind="numeric_equivalence"),
    )


def make_trace(problem_id="p1", trace_id="t1", steps=None, final_answer="4", correct=None):
    steps = steps if steps is not None else ["think", "conclude"]
    return ReasoningTrace(
        problem_id=problem_id,
        trace_id=trace_id,
        steps=steps,
        raw_text=render_trace(steps),
        final_answer=final_answer,
        parse_ok=final_answer is not None,
        correct=correct,
    )
