"""Best-of-K selection harness with pluggable trace scorers.

Candidates keep their generation order; the first K are considered, the
highest-scoring one is selected (ties to the lowest index), and the
validator decides success. Majority voting and single sampling (K=1) fall
out as special cases.
"""

import logging
import math
import random
from dataclasses import dataclass
from typing import Callable

from .ioutil import stable_seed
from .trace_model import Problem, ReasoningTrace, normalize_answer

log = logging.getLogger(__name__)

SCORE_FAILURE = float("-inf")

Scorer = Callable[[Problem, ReasoningTrace], float]
OutcomeValidator = Callable[[Problem, str], int]


@dataclass
class TraceScore:
    trace_id: str
    score: float
    scorer_id: str

    def __post_init__(self):
        if math.isnan(self.score):
            raise ValueError("trace score must not be NaN")


@dataclass
class ProblemSelection:
    problem_id: str
    selected_trace_id: str
    success: int


@dataclass
class BestOfKReport:
    k: int
    scorer_id: str
    per_problem: list[ProblemSelection]
    accuracy: float

    def to_json_dict(self) -> dict:
        return {
            "K": self.k,
            "scorer_id": self.scorer_id,
            "accuracy": self.accuracy,
            "per_problem": [
                {
                    "problem_id": s.problem_id,
                    "selected_trace_id": s.selected_trace_id,
                    "success": s.success,
                }
                for s in self.per_problem
            ],
        }


def step_product_score(step_probs: list[float]) -> float:
    """Product of per-step probabilities across the whole trace.

    No step is excluded here; final-step exclusion is a calibration-time
    concern only. An empty list yields the empty product, 1, with a warning.
    """
    for p in step_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"step probability out of [0, 1]: {p}")
    if not step_probs:
        log.warning("step_product_score called with no steps; empty product is 1")
        return 1.0
    return math.prod(step_probs)


def best_of_k(
    problems: list[Problem],
    candidates_by_problem: dict[str, list[ReasoningTrace]],
    scorer: Scorer,
    k: int,
    validator: OutcomeValidator,
    scorer_id: str | None = None,
) -> BestOfKReport:
    """Select the best of the first K candidates per problem and validate it.

    A scorer exception marks that candidate with a -inf sentinel, so it is
    never selected unless every candidate failed. An unparseable selected
    trace counts as failure without calling the validator.
    """
    if k < 1:
        raise ValueError("K must be at least 1")
    if scorer_id is None:
        scorer_id = getattr(scorer, "scorer_id", getattr(scorer, "__name__", "scorer"))
    selections: list[ProblemSelection] = []
    for problem in problems:
        candidates = candidates_by_problem.get(problem.id, [])
        if not candidates:
            raise ValueError(f"problem {problem.id!r} has no candidates")
        window = candidates[:k]
        scores = []
        for trace in window:
            try:
                scores.append(float(scorer(problem, trace)))
            except Exception as exc:
                log.warning("scorer failed on %s/%s: %s", problem.id, trace.trace_id, exc)
                scores.append(SCORE_FAILURE)
        best_idx = max(range(len(window)), key=lambda i: scores[i])
        selected = window[best_idx]
        if selected.parse_ok:
            success = int(validator(problem, selected.final_answer))
        else:
            success = 0
        selections.append(
            ProblemSelection(problem_id=problem.id, selected_trace_id=selected.trace_id, success=success)
        )
    accuracy = sum(s.success for s in selections) / len(selections) if selections else 0.0
    return BestOfKReport(k=k, scorer_id=scorer_id, per_problem=selections, accuracy=accuracy)


def majority_vote(candidates: list[ReasoningTrace], domain: str = "other") -> str | None:
    """Plurality answer among the parsed candidates, or None to abstain.

    Answers are grouped under the same normalization used for answer pools;
    ties go to the group whose first member appears earliest.
    """
    groups: dict[str, list[int]] = {}
    texts: dict[str, str] = {}
    for idx, trace in enumerate(candidates):
        if not trace.parse_ok:
            continue
        key = normalize_answer(trace.final_answer, domain)
        groups.setdefault(key, []).append(idx)
        texts.setdefault(key, trace.final_answer)
    if not groups:
        return None
    winner = min(groups, key=lambda key: (-len(groups[key]), groups[key][0]))
    return texts[winner]


def majority_best_of_k(
    problems: list[Problem],
    candidates_by_problem: dict[str, list[ReasoningTrace]],
    k: int,
    validator: OutcomeValidator,
) -> BestOfKReport:
    """Best-of-K report where the majority answer's earliest trace is selected."""

    def scorer(problem: Problem, trace: ReasoningTrace) -> float:
        window = candidates_by_problem[problem.id][:k]
        if not trace.parse_ok:
            return SCORE_FAILURE
        key = normalize_answer(trace.final_answer, problem.domain)
        votes = sum(
            1
            for t in window
            if t.parse_ok and normalize_answer(t.final_answer, problem.domain) == key
        )
        return float(votes)

    return best_of_k(problems, candidates_by_problem, scorer, k, validator, scorer_id="majority")


def oracle_scorer(validator: OutcomeValidator) -> Scorer:
    """Score = validator outcome; selects a correct candidate whenever one exists."""

    def scorer(problem: Problem, trace: ReasoningTrace) -> float:
        if not trace.parse_ok:
            return 0.0
        return float(validator(problem, trace.final_answer))

    scorer.scorer_id = "oracle"
    return scorer


def random_scorer(seed: int) -> Scorer:
    """Deterministic pseudo-random scores, independent per (problem, trace)."""

    def scorer(problem: Problem, trace: ReasoningTrace) -> float:
        return random.Random(stable_seed(seed, problem.id, trace.trace_id)).random()

    scorer.scorer_id = f"random:{seed}"
    return scorer


def step_product_scorer(step_probs_by_trace: dict[tuple[str, str], list[float]]) -> Scorer:
    """Score from an external table of per-step probabilities, keyed by
    (problem_id, trace_id). Missing traces count as scorer failures."""

    def scorer(problem: Problem, trace: ReasoningTrace) -> float:
        key = (problem.id, trace.trace_id)
        if key not in step_probs_by_trace:
            raise LookupError(f"no step probabilities for trace {key}")
        return step_product_score(step_probs_by_trace[key])

    scorer.scorer_id = "step-product"
    return scorer


def label_product_scorer(labels_by_trace: dict[tuple[str, str], list[int]]) -> Scorer:
    """Score from this toolkit's own binary labels, treated as 0/1 probabilities."""

    def scorer(problem: Problem, trace: ReasoningTrace) -> float:
        key = (problem.id, trace.trace_id)
        if key not in labels_by_trace:
            raise LookupError(f"no step labels for trace {key}")
        return step_product_score([float(l) for l in labels_by_trace[key]])

    scorer.scorer_id = "label-product"
    return scorer
