"""Serialization of labeled traces into step-level and outcome-level
training records, and the round-trip parser for them.

A step-level record interleaves the question and steps with a reserved
marker segment after every step; the classifier target (POS or NEG) applies
at each marker. An outcome-level record keeps the same layout but carries a
single target at the trailing marker only. The reserved symbols are literal
strings here; trainers map them onto unused vocabulary ids.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

from .errors import DataError, ReservedSymbolError
from .infogain import StepLabels
from .trace_model import Problem, ReasoningTrace

STEP_MARKER = "<|s_req|>"
POSITIVE_SYMBOL = "<|s_pos|>"
NEGATIVE_SYMBOL = "<|s_neg|>"
RESERVED_SYMBOLS = (STEP_MARKER, POSITIVE_SYMBOL, NEGATIVE_SYMBOL)

TARGET_POS = "POS"
TARGET_NEG = "NEG"


@dataclass
class Segment:
    text: str
    is_target: bool = False


@dataclass
class PRMRecord:
    problem_id: str
    trace_id: str
    segments: list[Segment]
    targets: list[str]
    extras: dict = field(default_factory=dict)


@dataclass
class ORMRecord:
    problem_id: str
    trace_id: str
    segments: list[Segment]
    target: str
    extras: dict = field(default_factory=dict)


Record = Union[PRMRecord, ORMRecord]


def _check_reserved(problem: Problem, trace: ReasoningTrace) -> None:
    for symbol in RESERVED_SYMBOLS:
        if symbol in problem.question:
            raise ReservedSymbolError(
                f"problem {problem.id!r}: question contains reserved symbol {symbol!r}",
                reason_code="reserved_symbol_in_question",
            )
        for step in trace.steps:
            if symbol in step:
                raise ReservedSymbolError(
                    f"trace {trace.trace_id!r}: step contains reserved symbol {symbol!r}",
                    reason_code="reserved_symbol_in_step",
                )


def _interleaved_segments(problem: Problem, trace: ReasoningTrace, target_markers: str) -> list[Segment]:
    """[question, step, marker, step, marker, ...]; ``target_markers`` is
    "all" or "last" and controls which markers carry a prediction target."""
    segments = [Segment(text=problem.question)]
    last = len(trace.steps) - 1
    for i, step in enumerate(trace.steps):
        segments.append(Segment(text=step))
        is_target = target_markers == "all" or i == last
        segments.append(Segment(text=STEP_MARKER, is_target=is_target))
    return segments


def emit_prm_record(problem: Problem, trace: ReasoningTrace, labels: StepLabels) -> PRMRecord:
    """Build a step-level record: one target marker per step, POS where the
    step label is 1."""
    if len(labels.labels) != len(trace.steps):
        raise ValueError(
            f"trace {trace.trace_id!r}: {len(labels.labels)} labels for {len(trace.steps)} steps"
        )
    _check_reserved(problem, trace)
    return PRMRecord(
        problem_id=problem.id,
        trace_id=trace.trace_id,
        segments=_interleaved_segments(problem, trace, target_markers="all"),
        targets=[TARGET_POS if l == 1 else TARGET_NEG for l in labels.labels],
    )


def emit_orm_record(problem: Problem, trace: ReasoningTrace) -> ORMRecord:
    """Build an outcome-level record: the single trailing marker carries the
    validator outcome."""
    if trace.correct is None:
        raise ValueError(f"trace {trace.trace_id!r} has no validation outcome")
    _check_reserved(problem, trace)
    return ORMRecord(
        problem_id=problem.id,
        trace_id=trace.trace_id,
        segments=_interleaved_segments(problem, trace, target_markers="last"),
        target=TARGET_POS if trace.correct else TARGET_NEG,
    )


def serialize_record(record: Record) -> str:
    """One JSON line, canonical key order. Extras survive verbatim so that a
    parse/serialize round trip is byte-identical."""
    obj: dict = {
        "problem_id": record.problem_id,
        "trace_id": record.trace_id,
        "segments": [{"text": s.text, "is_target": s.is_target} for s in record.segments],
    }
    if isinstance(record, PRMRecord):
        obj["targets"] = record.targets
    else:
        obj["target"] = record.target
    obj.update(record.extras)
    return json.dumps(obj, ensure_ascii=False)


def parse_record_line(line: str, lineno: int = 0) -> Record:
    """Parse a serialized record, validating its marker layout.

    Unknown fields are kept (tolerant reader). Malformed lines raise
    :class:`DataError` with line and offset information.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: invalid JSON: {exc.msg}", line=lineno, offset=exc.colno) from exc
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: record is not an object", line=lineno)
    try:
        segments = [Segment(text=s["text"], is_target=bool(s["is_target"])) for s in obj["segments"]]
        problem_id = obj["problem_id"]
        trace_id = obj["trace_id"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"line {lineno}: missing record field: {exc}", line=lineno) from exc
    known = {"problem_id", "trace_id", "segments", "targets", "target"}
    extras = {k: v for k, v in obj.items() if k not in known}
    n_targets = sum(1 for s in segments if s.is_target)
    if not segments or segments[0].is_target:
        raise DataError(f"line {lineno}: record must start with a question segment", line=lineno)
    if "targets" in obj:
        targets = list(obj["targets"])
        if len(targets) != n_targets:
            raise DataError(
                f"line {lineno}: {len(targets)} targets for {n_targets} marker segments", line=lineno
            )
        return PRMRecord(problem_id, trace_id, segments, targets, extras)
    if "target" in obj:
        if n_targets != 1 or not segments[-1].is_target:
            raise DataError(
                f"line {lineno}: outcome record must have exactly one trailing target", line=lineno
            )
        return ORMRecord(problem_id, trace_id, segments, obj["target"], extras)
    raise DataError(f"line {lineno}: record has neither 'targets' nor 'target'", line=lineno)


def write_shards(
    records: Iterable[Record],
    directory: str | Path,
    split: str,
    records_per_shard: int = 100_000,
) -> list[Path]:
    """Write records into ``{split}-{shard:05d}.jsonl`` files."""
    if records_per_shard < 1:
        raise ValueError("records_per_shard must be at least 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    handle = None
    written = 0
    try:
        for record in records:
            if handle is None or written >= records_per_shard:
                if handle is not None:
                    handle.close()
                path = directory / f"{split}-{len(paths):05d}.jsonl"
                handle = open(path, "w", encoding="utf-8")
                paths.append(path)
                written = 0
            handle.write(serialize_record(record) + "\n")
            written += 1
    finally:
        if handle is not None:
            handle.close()
    return paths


def read_records(path: str | Path) -> Iterator[Record]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield parse_record_line(line, lineno=lineno)


def label_balance(records: Iterable[Record]) -> dict[str, int]:
    """Dataset-level POS/NEG target counts."""
    counts = {TARGET_POS: 0, TARGET_NEG: 0}
    for record in records:
        targets = record.targets if isinstance(record, PRMRecord) else [record.target]
        for t in targets:
            counts[t] = counts.get(t, 0) + 1
    return counts
