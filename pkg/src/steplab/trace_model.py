"""Problems, reasoning traces, answer pools, and train-set filtering.

Generation format conventions: reasoning steps are separated by the literal
token ``[STEP]``; the final answer appears in the last step, wrapped in
dollar signs for math/qa or a triple-backtick fence for python/sql.
"""

import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import ConfigError, ValidatorError
from .ioutil import read_jsonl, stable_seed, write_jsonl
from .validators import ValidatorSpec, parse_numeric

log = logging.getLogger(__name__)

STEP_DELIMITER = "[STEP]"
DOMAINS = ("math", "python", "sql", "qa", "other")

_DOLLAR_SPAN_RE = re.compile(r"\$([^$]*)\$")
_FENCE_RE = re.compile(r"```(.*?)```", re.DOTALL)
_LANG_TAG_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_+-]*$")


@dataclass
class Problem:
    """A question with its gold answer and validator description."""

    id: str
    domain: str
    question: str
    gold_answer: str
    validator_spec: ValidatorSpec | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if not self.gold_answer:
            raise ValueError(f"problem {self.id!r}: gold answer must be non-empty")
        if self.domain not in DOMAINS:
            raise ValueError(f"problem {self.id!r}: unknown domain {self.domain!r}")


@dataclass
class ReasoningTrace:
    """A parsed multi-step answer to one problem.

    ``parse_ok`` is true exactly when a final answer could be extracted;
    ``correct`` is set by validation and only for parseable traces.
    """

    problem_id: str
    trace_id: str
    steps: list[str]
    raw_text: str
    final_answer: str | None
    parse_ok: bool
    correct: bool | None = None

    def __post_init__(self):
        if self.parse_ok != (self.final_answer is not None):
            raise ValueError("parse_ok must mirror the presence of final_answer")
        if not self.steps or any(not s for s in self.steps):
            raise ValueError("steps must be a non-empty list of non-empty strings")
        if self.correct is not None and not self.parse_ok:
            raise ValueError("only parseable traces can carry a validation outcome")


@dataclass
class AnswerPool:
    """Validated final answers for one problem, split into correct and wrong.

    Answers are deduplicated under :func:`normalize_answer`; ``multiplicity``
    keeps the original counts and ``diagnostics`` records answers whose
    validator failed (they are filed under ``wrong``).
    """

    problem_id: str
    correct: list[str] = field(default_factory=list)
    wrong: list[str] = field(default_factory=list)
    multiplicity: dict[str, int] = field(default_factory=dict)
    diagnostics: dict[str, str] = field(default_factory=dict)

    def answers(self) -> list[str]:
        return self.correct + self.wrong


@dataclass
class GenerationConfig:
    """Sampling settings for trace generation pass-through."""

    samples_per_problem: int
    temperature: float = 1.0
    top_p: float = 0.95

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.samples_per_problem < 1:
            raise ValueError("samples_per_problem must be at least 1")


def extract_answer(step_text: str, domain: str) -> str | None:
    """Extract the final answer from a step's text, or None.

    math/qa: content of the last non-empty ``$...$`` span. python/sql:
    content of the last fenced block, with a leading language-tag line
    stripped. The "other" domain accepts either wrapper, taking whichever
    occurs last.
    """
    spans: list[tuple[int, str]] = []
    if domain in ("math", "qa", "other"):
        for m in _DOLLAR_SPAN_RE.finditer(step_text):
            content = m.group(1).strip()
            if content:
                spans.append((m.start(), content))
    if domain in ("python", "sql", "other"):
        for m in _FENCE_RE.finditer(step_text):
            content = _strip_language_tag(m.group(1))
            if content:
                spans.append((m.start(), content))
    if not spans:
        return None
    return max(spans, key=lambda pair: pair[0])[1]


def _strip_language_tag(fence_body: str) -> str:
    lines = fence_body.split("\n")
    if len(lines) > 1 and (not lines[0].strip() or _LANG_TAG_RE.fullmatch(lines[0].strip())):
        lines = lines[1:]
    return "\n".join(lines).strip()


def parse_trace(raw: str, domain: str, problem_id: str = "", trace_id: str = "") -> ReasoningTrace:
    """Split raw model output on the step delimiter and extract the answer.

    Never aborts on an unextractable answer (``parse_ok`` goes false); raw
    text with no step content at all is a hard error.
    """
    if not raw or not raw.strip():
        raise ValueError("trace text is empty")
    steps = [seg.strip() for seg in raw.split(STEP_DELIMITER)]
    steps = [seg for seg in steps if seg]
    if not steps:
        raise ValueError("trace text contains no step content")
    final_answer = extract_answer(steps[-1], domain)
    return ReasoningTrace(
        problem_id=problem_id,
        trace_id=trace_id,
        steps=steps,
        raw_text=raw,
        final_answer=final_answer,
        parse_ok=final_answer is not None,
    )


def render_trace(steps: Iterable[str]) -> str:
    """Inverse of the delimiter split, for traces whose steps contain no delimiter."""
    return f" {STEP_DELIMITER} ".join(steps)


def normalize_answer(text: str, domain: str) -> str:
    """Answer-equivalence key: trimmed, whitespace-collapsed, and for math
    canonicalized to an exact rational when the text parses as a number."""
    collapsed = " ".join(text.split())
    if domain == "math":
        number = parse_numeric(collapsed)
        if number is not None:
            return str(number)
    return collapsed


def build_answer_pool(
    problem: Problem,
    traces: list[ReasoningTrace],
    validator: Callable[[str], int],
) -> AnswerPool:
    """Partition the parsed final answers of ``traces`` into correct and wrong.

    Each distinct answer (under normalization) is validated exactly once; the
    first-seen spelling represents its group. A validator crash records the
    answer as wrong with a diagnostic instead of sinking the whole problem.
    """
    pool = AnswerPool(problem_id=problem.id)
    representatives: dict[str, str] = {}
    for trace in traces:
        if trace.problem_id != problem.id:
            raise ValueError(f"trace {trace.trace_id!r} does not belong to problem {problem.id!r}")
        if not trace.parse_ok:
            continue
        key = normalize_answer(trace.final_answer, problem.domain)
        representatives.setdefault(key, trace.final_answer)
        pool.multiplicity[representatives[key]] = pool.multiplicity.get(representatives[key], 0) + 1
    for answer in representatives.values():
        try:
            outcome = validator(answer)
        except ValidatorError as exc:
            log.warning("problem %s: validator error on %r: %s", problem.id, answer, exc)
            pool.wrong.append(answer)
            pool.diagnostics[answer] = f"validator_error: {exc}"
            continue
        if outcome == 1:
            pool.correct.append(answer)
        else:
            pool.wrong.append(answer)
    return pool


@dataclass
class FilterResult:
    """Working set produced by :func:`filter_and_subsample` plus drop log."""

    kept: list[tuple[Problem, list[ReasoningTrace]]]
    dropped: dict[str, str]


def filter_and_subsample(
    problems: list[Problem],
    traces_by_problem: dict[str, list[ReasoningTrace]],
    k: int = 8,
    seed: int = 0,
) -> FilterResult:
    """Build the working candidate set for labeling.

    Unparseable traces are removed, problems whose parsed traces are all
    correct are dropped (no contrast), and each surviving problem keeps a
    seeded subsample of min(k, available) traces that includes at least one
    correct trace whenever one exists, the remaining slots being filled with
    incorrect traces first. The RNG is derived from (seed, problem id) so the
    choice is independent of dataset order.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    kept: list[tuple[Problem, list[ReasoningTrace]]] = []
    dropped: dict[str, str] = {}
    for problem in problems:
        parsed = [t for t in traces_by_problem.get(problem.id, []) if t.parse_ok]
        if not parsed:
            dropped[problem.id] = "no_parsed_traces"
            log.info("dropped problem %s: no_parsed_traces", problem.id)
            continue
        if any(t.correct is None for t in parsed):
            raise ValueError(f"problem {problem.id!r}: traces must be validated before filtering")
        if all(t.correct for t in parsed):
            dropped[problem.id] = "all_correct"
            log.info("dropped problem %s: all_correct", problem.id)
            continue
        kept.append((problem, _subsample(parsed, k, seed, problem.id)))
    return FilterResult(kept=kept, dropped=dropped)


def _subsample(parsed: list[ReasoningTrace], k: int, seed: int, problem_id: str) -> list[ReasoningTrace]:
    rng = random.Random(stable_seed(seed, problem_id))
    target = min(k, len(parsed))
    correct = [t for t in parsed if t.correct]
    wrong = [t for t in parsed if not t.correct]
    chosen: list[ReasoningTrace] = []
    if correct:
        chosen.append(rng.choice(correct))
    need = target - len(chosen)
    chosen.extend(rng.sample(wrong, min(need, len(wrong))))
    if len(chosen) < target:
        chosen_ids = {t.trace_id for t in chosen}
        remaining = [t for t in correct if t.trace_id not in chosen_ids]
        chosen.extend(rng.sample(remaining, target - len(chosen)))
    order = {id(t): i for i, t in enumerate(parsed)}
    chosen.sort(key=lambda t: order[id(t)])
    return chosen


# ---------------------------------------------------------------------------
# JSONL interfaces


def read_problems(path: str | Path) -> list[Problem]:
    problems = []
    for obj in read_jsonl(path):
        spec = ValidatorSpec.from_json_dict(obj["validator"]) if obj.get("validator") else None
        problems.append(
            Problem(
                id=obj["id"],
                domain=obj["domain"],
                question=obj["question"],
                gold_answer=obj["gold_answer"],
                validator_spec=spec,
            )
        )
    seen: set[str] = set()
    for p in problems:
        if p.id in seen:
            raise ConfigError(f"duplicate problem id {p.id!r} in {path}")
        seen.add(p.id)
    return problems


def write_problems(path: str | Path, problems: Iterable[Problem]) -> None:
    write_jsonl(
        path,
        (
            {
                "id": p.id,
                "domain": p.domain,
                "question": p.question,
                "gold_answer": p.gold_answer,
                "validator": p.validator_spec.to_json_dict() if p.validator_spec else None,
            }
            for p in problems
        ),
    )


def read_raw_traces(path: str | Path) -> Iterable[dict]:
    """Raw generation records: {problem_id, trace_id, raw_text}."""
    return read_jsonl(path)


def trace_to_json_dict(trace: ReasoningTrace) -> dict:
    return {
        "problem_id": trace.problem_id,
        "trace_id": trace.trace_id,
        "steps": trace.steps,
        "final_answer": trace.final_answer,
        "parse_ok": trace.parse_ok,
        "correct": trace.correct,
    }


def trace_from_json_dict(obj: dict) -> ReasoningTrace:
    correct = obj.get("correct")
    return ReasoningTrace(
        problem_id=obj["problem_id"],
        trace_id=obj["trace_id"],
        steps=list(obj["steps"]),
        raw_text=render_trace(obj["steps"]),
        final_answer=obj.get("final_answer"),
        parse_ok=bool(obj["parse_ok"]),
        correct=None if correct is None else bool(correct),
    )


def write_traces(path: str | Path, traces: Iterable[ReasoningTrace]) -> None:
    write_jsonl(path, (trace_to_json_dict(t) for t in traces))


def read_traces(path: str | Path) -> list[ReasoningTrace]:
    return [trace_from_json_dict(obj) for obj in read_jsonl(path)]
