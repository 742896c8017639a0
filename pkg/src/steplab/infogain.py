"""Step-quality signals derived from information profiles.

Two signals are computed per trace, both in nats:

* the gold-answer lift of each step prefix over the no-reasoning baseline
  (method "IG"), and
* the net-information gain (method "MCNIG"): the aggregated information of
  correct pool answers minus that of incorrect ones, referenced either to
  step 0 or to the previous step.

Binary step labels come from thresholding a signal with a strict ``>``.
"""

from dataclasses import dataclass
from statistics import fmean

from .errors import ConfigError, UndefinedSignalError
from .scoring import InformationProfile
from .trace_model import AnswerPool

METHODS = ("IG", "MCNIG")
AGGREGATIONS = ("max", "mean")
REFERENCES = ("step0", "previous")


@dataclass
class StepSignal:
    """Per-step signal values for one trace, indexed i = 1..N."""

    problem_id: str
    trace_id: str
    method: str
    values: list[float]
    aggregation: str | None = None
    reference: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "trace_id": self.trace_id,
            "method": self.method,
            "aggregation": self.aggregation,
            "reference": self.reference,
            "values": self.values,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StepSignal":
        return cls(
            problem_id=obj["problem_id"],
            trace_id=obj["trace_id"],
            method=obj["method"],
            values=[float(v) for v in obj["values"]],
            aggregation=obj.get("aggregation"),
            reference=obj.get("reference"),
        )


@dataclass
class StepLabels:
    """Thresholded binary labels for one trace, aligned with its signal."""

    problem_id: str
    trace_id: str
    labels: list[int]
    threshold: float

    def to_json_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "trace_id": self.trace_id,
            "labels": self.labels,
            "threshold": self.threshold,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StepLabels":
        return cls(
            problem_id=obj["problem_id"],
            trace_id=obj["trace_id"],
            labels=[int(v) for v in obj["labels"]],
            threshold=float(obj["threshold"]),
        )


def ig_signal(profile: InformationProfile, gold_answer: str) -> StepSignal:
    """Gold-answer information lift of each step prefix over step 0."""
    try:
        col = profile.column(gold_answer)
    except KeyError:
        raise ConfigError(
            f"gold answer {gold_answer!r} was not scored into profile "
            f"{profile.problem_id}/{profile.trace_id}"
        ) from None
    base = profile.values[0][col]
    return StepSignal(
        problem_id=profile.problem_id,
        trace_id=profile.trace_id,
        method="IG",
        values=[profile.values[i][col] - base for i in range(1, len(profile.values))],
    )


def _aggregate(row: list[float], columns: list[int], aggregation: str) -> float:
    picked = [row[c] for c in columns]
    if aggregation == "max":
        return max(picked)
    if aggregation == "mean":
        return fmean(picked)
    raise ConfigError(f"unknown aggregation: {aggregation!r}")


def net_info(profile: InformationProfile, pool: AnswerPool, aggregation: str = "max") -> list[float]:
    """Aggregated correct-answer information minus aggregated wrong-answer
    information, one value per step prefix 0..N.

    Undefined when either side of the pool is empty. ``max`` keeps the
    strongest alternative on each side; ``mean`` averages in log space.
    """
    if not pool.correct or not pool.wrong:
        missing = "correct" if not pool.correct else "wrong"
        raise UndefinedSignalError(
            f"problem {pool.problem_id!r}: cannot aggregate over an empty {missing} answer set"
        )
    try:
        c_cols = [profile.column(a) for a in pool.correct]
        w_cols = [profile.column(a) for a in pool.wrong]
    except KeyError as exc:
        raise ConfigError(f"pool answer missing from profile: {exc}") from None
    return [
        _aggregate(row, c_cols, aggregation) - _aggregate(row, w_cols, aggregation)
        for row in profile.values
    ]


def mcnig_extended(
    profile: InformationProfile,
    pool: AnswerPool,
    aggregation: str = "max",
    reference: str = "step0",
) -> list[float]:
    """Net-information gain including the step-0 entry, which is 0 by
    construction under either reference."""
    net = net_info(profile, pool, aggregation)
    if reference == "step0":
        return [v - net[0] for v in net]
    if reference == "previous":
        return [0.0] + [net[i] - net[i - 1] for i in range(1, len(net))]
    raise ConfigError(f"unknown reference: {reference!r}")


def mcnig_signal(
    profile: InformationProfile,
    pool: AnswerPool,
    aggregation: str = "max",
    reference: str = "step0",
) -> StepSignal:
    extended = mcnig_extended(profile, pool, aggregation, reference)
    assert extended[0] == 0.0
    return StepSignal(
        problem_id=profile.problem_id,
        trace_id=profile.trace_id,
        method="MCNIG",
        aggregation=aggregation,
        reference=reference,
        values=extended[1:],
    )


def assign_labels(signal: StepSignal, threshold: float) -> StepLabels:
    """Label step i positive iff its signal value strictly exceeds the threshold."""
    return StepLabels(
        problem_id=signal.problem_id,
        trace_id=signal.trace_id,
        labels=[int(v > threshold) for v in signal.values],
        threshold=threshold,
    )
