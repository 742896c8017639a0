"""Task-specific answer validators.

A validator maps a candidate final answer to 0 or 1 for a given problem.
Four kinds are supported:

* ``numeric_equivalence`` for math-style answers (rationals, decimals),
* ``sql_execution`` comparing query results on an embedded SQLite fixture,
* ``external_command`` running the candidate against a shell command
  (the escape hatch for unit-test style checking),
* ``normalized_exact`` for short free-text answers.

Candidate-level failures (a query that does not run, a failing test) count
as 0. Infrastructure failures (missing fixture, unspawnable command) raise
:class:`ValidatorError` so callers can distinguish them from model errors.
"""

import logging
import math
import re
import shlex
import sqlite3
import string
import subprocess
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Callable

from .errors import ConfigError, ValidatorError

log = logging.getLogger(__name__)

VALIDATOR_KINDS = ("numeric_equivalence", "sql_execution", "external_command", "normalized_exact")

DEFAULT_REL_TOL = 1e-9
DEFAULT_COMMAND_TIMEOUT_S = 30.0

# Callers may run validators from worker threads; child processes stay
# bounded regardless.
MAX_CONCURRENT_COMMANDS = 8
_command_slots = threading.BoundedSemaphore(MAX_CONCURRENT_COMMANDS)


def set_max_concurrent_commands(limit: int) -> None:
    global _command_slots
    if limit < 1:
        raise ConfigError("command concurrency limit must be at least 1")
    _command_slots = threading.BoundedSemaphore(limit)


@dataclass(frozen=True)
class ValidatorSpec:
    """Declarative description of how to check answers for one problem.

    ``payload`` keys by kind:
      numeric_equivalence: gold (optional, defaults to the problem's gold
        answer), rel_tol (optional)
      sql_execution: fixture (path to a .sqlite file or .sql build script),
        gold_query
      external_command: command (template containing ``{candidate}``),
        timeout_s (optional)
      normalized_exact: gold (optional, defaults to the problem's gold answer)
    """

    kind: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in VALIDATOR_KINDS:
            raise ConfigError(f"unknown validator kind: {self.kind!r}")
        if self.kind == "sql_execution":
            for key in ("fixture", "gold_query"):
                if not self.payload.get(key):
                    raise ConfigError(f"sql_execution validator requires payload key {key!r}")
        if self.kind == "external_command":
            command = self.payload.get("command", "")
            if "{candidate}" not in command:
                raise ConfigError("external_command validator requires a command template with {candidate}")
            timeout = self.payload.get("timeout_s")
            if timeout is not None and timeout <= 0:
                raise ConfigError("validator timeout_s must be positive")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, **self.payload}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ValidatorSpec":
        obj = dict(obj)
        kind = obj.pop("kind", None)
        if kind is None:
            raise ConfigError("validator object is missing 'kind'")
        return cls(kind=kind, payload=obj)


@dataclass
class SqlCheck:
    value: int
    diagnostic: str | None = None


@dataclass
class CommandCheck:
    value: int
    diagnostic: str | None = None
    timed_out: bool = False


def parse_numeric(text: str) -> Fraction | None:
    """Parse integers, decimals, and simple p/q fractions to an exact rational.

    A leading currency ``$`` and thousands separators are tolerated. Returns
    None for anything else (symbolic expressions stay unparsed on purpose).
    """
    s = text.strip()
    if s.startswith("$"):
        s = s[1:].strip()
    if re.fullmatch(r"[+-]?\d{1,3}(,\d{3})+(\.\d+)?", s):
        s = s.replace(",", "")
    m = re.fullmatch(r"([+-]?\d+)\s*/\s*([+-]?\d+)", s)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        if den == 0:
            return None
        return Fraction(num, den)
    if s.lower() in ("inf", "-inf", "infinity", "-infinity", "nan"):
        return None
    try:
        return Fraction(Decimal(s))
    except (InvalidOperation, ValueError, OverflowError):
        return None


def _collapse_ws(text: str) -> str:
    return " ".join(text.split())


def _normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, and strip punctuation at token edges."""
    tokens = [t.strip(string.punctuation) for t in text.lower().split()]
    return " ".join(t for t in tokens if t)


def numeric_equivalent(a: str, b: str, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """1 iff both strings parse as numbers equal within ``rel_tol``, or both
    collapse to the same string. Unparseable pairs fall back to string
    equality after whitespace collapsing."""
    fa, fb = parse_numeric(a), parse_numeric(b)
    if fa is not None and fb is not None:
        if fa == fb:
            return 1
        try:
            return int(math.isclose(float(fa), float(fb), rel_tol=rel_tol, abs_tol=0.0))
        except OverflowError:
            return 0
    return int(_collapse_ws(a) == _collapse_ws(b))


def normalized_exact(candidate: str, gold: str) -> int:
    """1 iff the strings match after case, whitespace, and edge-punctuation
    normalization ("Yes." matches "yes")."""
    return int(_normalize_text(candidate) == _normalize_text(gold))


def _has_order_by(query: str) -> bool:
    return re.search(r"\border\s+by\b", query, re.IGNORECASE) is not None


def _open_fixture(fixture: str | Path) -> sqlite3.Connection:
    path = Path(fixture)
    if not path.exists():
        raise ValidatorError(f"database fixture not found: {path}")
    if path.suffix == ".sql":
        conn = sqlite3.connect(":memory:")
        try:
            conn.executescript(path.read_text(encoding="utf-8"))
        except sqlite3.Error as exc:
            conn.close()
            raise ValidatorError(f"failed to build fixture from {path}: {exc}") from exc
        return conn
    try:
        # Read-only URI keeps each invocation isolated from every other.
        return sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    except sqlite3.Error as exc:
        raise ValidatorError(f"failed to open fixture {path}: {exc}") from exc


def check_sql(candidate_query: str, gold_query: str, fixture: str | Path) -> SqlCheck:
    """Execute both queries on the fixture and compare result multisets.

    Comparison is order-insensitive unless the gold query carries an explicit
    ORDER BY, in which case row order must match too. A candidate that fails
    to execute scores 0 with a diagnostic; a broken fixture or gold query is
    an infrastructure error.
    """
    conn = _open_fixture(fixture)
    try:
        try:
            gold_rows = conn.execute(gold_query).fetchall()
        except sqlite3.Error as exc:
            raise ValidatorError(f"gold query failed on fixture: {exc}") from exc
        try:
            cand_rows = conn.execute(candidate_query).fetchall()
        except sqlite3.Error as exc:
            return SqlCheck(0, f"execution error: {exc}")
        if _has_order_by(gold_query):
            equal = cand_rows == gold_rows
        else:
            equal = Counter(cand_rows) == Counter(gold_rows)
        return SqlCheck(int(equal), None if equal else "result mismatch")
    finally:
        conn.close()


def sql_equivalent(candidate_query: str, gold_query: str, fixture: str | Path) -> int:
    return check_sql(candidate_query, gold_query, fixture).value


def check_external(command_template: str, candidate: str, timeout_s: float = DEFAULT_COMMAND_TIMEOUT_S) -> CommandCheck:
    """Materialize the candidate to a file and run the command template on it.

    The command runs in a throwaway working directory with ``{candidate}``
    replaced by the file path. Exit status 0 scores 1, anything else 0.
    Timeouts score 0 with the ``timed_out`` flag; a command that cannot be
    spawned at all raises :class:`ValidatorError`.
    """
    if "{candidate}" not in command_template:
        raise ValidatorError("command template must contain a {candidate} placeholder")
    with tempfile.TemporaryDirectory(prefix="steplab-validate-") as workdir:
        cand_path = Path(workdir) / "candidate"
        cand_path.write_text(candidate, encoding="utf-8")
        argv = shlex.split(command_template.replace("{candidate}", str(cand_path)))
        if not argv:
            raise ValidatorError("command template is empty")
        try:
            with _command_slots:
                proc = subprocess.run(argv, cwd=workdir, capture_output=True, timeout=timeout_s)
        except subprocess.TimeoutExpired:
            return CommandCheck(0, f"timeout after {timeout_s}s", timed_out=True)
        except FileNotFoundError as exc:
            raise ValidatorError(f"command not found: {argv[0]}") from exc
        except OSError as exc:
            raise ValidatorError(f"failed to spawn command: {exc}") from exc
        if proc.returncode == 0:
            return CommandCheck(1)
        stderr_tail = proc.stderr.decode("utf-8", "replace").strip()[-200:]
        return CommandCheck(0, f"exit status {proc.returncode}: {stderr_tail}")


def run_external(command_template: str, candidate: str, timeout_s: float = DEFAULT_COMMAND_TIMEOUT_S) -> int:
    return check_external(command_template, candidate, timeout_s).value


def validate(spec: ValidatorSpec, candidate: str, problem) -> int:
    """Apply the validator described by ``spec`` to a candidate answer.

    Deterministic in its arguments and any fixture contents.
    """
    if not candidate:
        raise ValueError("candidate answer must be non-empty")
    if spec.kind == "numeric_equivalence":
        gold = spec.payload.get("gold") or problem.gold_answer
        rel_tol = spec.payload.get("rel_tol", DEFAULT_REL_TOL)
        return numeric_equivalent(candidate, gold, rel_tol)
    if spec.kind == "normalized_exact":
        gold = spec.payload.get("gold") or problem.gold_answer
        return normalized_exact(candidate, gold)
    if spec.kind == "sql_execution":
        return check_sql(candidate, spec.payload["gold_query"], spec.payload["fixture"]).value
    if spec.kind == "external_command":
        timeout_s = spec.payload.get("timeout_s", DEFAULT_COMMAND_TIMEOUT_S)
        return check_external(spec.payload["command"], candidate, timeout_s).value
    raise ConfigError(f"unknown validator kind: {spec.kind!r}")


def make_validator(problem) -> Callable[[str], int]:
    """Bind a problem's validator spec into a ``candidate -> {0,1}`` callable."""
    spec = problem.validator_spec
    if spec is None:
        raise ConfigError(f"problem {problem.id!r} has no validator spec")
    return lambda candidate: validate(spec, candidate, problem)
