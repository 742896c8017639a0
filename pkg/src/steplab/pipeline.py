"""Stage orchestration: ingest, validate, score, signals, sweep, label,
emit, eval.

Each stage reads the previous stage's JSONL artifacts from the run
directory, writes its own atomically, and records a manifest with input
digests and per-item drop reasons. A stage whose inputs and configuration
are unchanged is skipped on re-run, which makes the expensive scoring stage
idempotent. Outputs are byte-stable given identical inputs, configuration,
and seed; only manifests carry timestamps.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .calibration import percentile_grid, sweep_threshold
from .dataset_emit import emit_orm_record, emit_prm_record, label_balance, write_shards
from .errors import ConfigError, DataError, ReservedSymbolError, UndefinedMetricError, ValidatorError
from .evaluation import (
    best_of_k,
    label_product_scorer,
    majority_best_of_k,
    oracle_scorer,
    random_scorer,
    step_product_scorer,
)
from .infogain import StepLabels, StepSignal, assign_labels, ig_signal, mcnig_signal
from .ioutil import atomic_write_text, read_jsonl, sha256_file, sha256_text, write_jsonl
from .scoring import InformationProfile, information_profile, make_backend
from .trace_model import (
    AnswerPool,
    Problem,
    build_answer_pool,
    filter_and_subsample,
    normalize_answer,
    parse_trace,
    read_problems,
    read_raw_traces,
    read_traces,
    write_problems,
    write_traces,
)
from .validators import make_validator

log = logging.getLogger(__name__)

# Signals are computed once; the sweep calibrates thresholds from them and
# labeling then consumes the thresholds file, so emitted datasets always use
# calibrated labels.
STAGES = ("ingest", "validate", "score", "signals", "sweep", "label", "emit", "eval")
FULL_SEQUENCE = STAGES

EVAL_SCORERS = ("step-product", "orm", "label-product", "oracle", "random", "majority")

ENV_BACKEND = "STEPLAB_BACKEND_URL"
ENV_CACHE_DIR = "STEPLAB_CACHE_DIR"


@dataclass
class RunConfig:
    problems: str = ""
    traces: str = ""
    out_dir: str = ""
    backend: str = ""
    cache_dir: str = ""
    seed: int = 0
    domains: list[str] = field(default_factory=list)
    method: str = "mcnig"
    aggregation: str = "max"
    reference: str = "step0"
    k_subsample: int = 8
    thresholds_file: str = ""
    concurrency_limit: int = 1
    backend_timeout_s: float = 30.0
    backend_retries: int = 3
    backend_backoff_s: float = 0.5
    grid_size: int = 256
    eval_scorer: str = "label-product"
    eval_k: int = 8
    step_scores: str = ""
    split: str = "train"
    shard_size: int = 100_000
    force: bool = False

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be at least 1")
        if self.method not in ("ig", "mcnig"):
            raise ConfigError(f"unknown method: {self.method!r}")
        if self.aggregation not in ("max", "mean"):
            raise ConfigError(f"unknown aggregation: {self.aggregation!r}")
        if self.reference not in ("step0", "previous"):
            raise ConfigError(f"unknown reference: {self.reference!r}")

    @property
    def out(self) -> Path:
        if not self.out_dir:
            raise ConfigError("out_dir is not configured")
        return Path(self.out_dir)

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_config_file(path: str | Path) -> dict:
    """Flat key = value config format with # comments.

    Strings may be quoted; true/false, integers, and floats are coerced;
    the ``domains`` key takes a comma-separated list.
    """
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        values[key.strip()] = _coerce_value(key.strip(), raw.strip())
    return values


def _coerce_value(key: str, raw: str):
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if key == "domains":
        return [part.strip() for part in raw.split(",") if part.strip()]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def load_config(
    config_file: str | None = None,
    overrides: dict | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Merge config sources: file, then environment, then explicit overrides."""
    env = os.environ if env is None else env
    values: dict = {}
    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config file not found: {config_file}")
        values.update(parse_config_file(config_file))
    if env.get(ENV_BACKEND):
        values["backend"] = env[ENV_BACKEND]
    if env.get(ENV_CACHE_DIR):
        values["cache_dir"] = env[ENV_CACHE_DIR]
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# Artifact paths


def artifact_paths(out: Path) -> dict[str, Path]:
    return {
        "problems": out / "problems.jsonl",
        "parsed_traces": out / "parsed_traces.jsonl",
        "validated_traces": out / "validated_traces.jsonl",
        "pools": out / "pools.jsonl",
        "working_set": out / "working_set.jsonl",
        "profiles": out / "profiles.jsonl",
        "signals": out / "signals.jsonl",
        "step_labels": out / "step_labels.jsonl",
        "sweep": out / "sweep.json",
        "thresholds": out / "thresholds.json",
        "prm_dir": out / "prm",
        "orm_dir": out / "orm",
        "emit_report": out / "emit_report.json",
        "eval_report": out / "eval_report.json",
        "manifest": out / "manifest.json",
    }


def _require(paths: dict[str, Path], names: list[str], stage: str) -> None:
    for name in names:
        if not paths[name].exists():
            raise ConfigError(
                f"stage {stage!r} needs {paths[name]}; run the upstream stage first"
            )


def _digest_paths(paths: list[Path]) -> dict[str, str]:
    digests = {}
    for p in paths:
        if p.is_dir():
            for child in sorted(p.glob("*.jsonl")):
                digests[str(child)] = sha256_file(child)
        else:
            digests[str(p)] = sha256_file(p)
    return digests


def _fingerprint(inputs: dict[str, str], config_keys: dict) -> str:
    return sha256_text(json.dumps({"inputs": inputs, "config": config_keys}, sort_keys=True))


def _stage_manifest_path(out: Path, stage: str) -> Path:
    return out / "stages" / f"{stage}.json"


def _maybe_skip(out: Path, stage: str, fingerprint: str, force: bool) -> dict | None:
    """Return the stored report when the stage is up to date, else None."""
    if force:
        return None
    manifest_path = _stage_manifest_path(out, stage)
    if not manifest_path.exists():
        return None
    stored = json.loads(manifest_path.read_text(encoding="utf-8"))
    if stored.get("fingerprint") != fingerprint:
        return None
    for output in stored.get("outputs", []):
        if not Path(output).exists():
            return None
    stored["skipped"] = True
    log.info("stage %s is up to date, skipped", stage)
    return stored


def _finish_stage(
    out: Path,
    stage: str,
    fingerprint: str,
    inputs: dict[str, str],
    outputs: list[Path],
    counts: dict,
) -> dict:
    report = {
        "name": stage,
        "fingerprint": fingerprint,
        "inputs": inputs,
        "outputs": [str(p) for p in outputs],
        "counts": counts,
        "skipped": False,
    }
    atomic_write_text(_stage_manifest_path(out, stage), json.dumps(report, ensure_ascii=False, indent=1))
    return report


# ---------------------------------------------------------------------------
# Stages


def stage_ingest(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    if not cfg.problems or not Path(cfg.problems).exists():
        raise ConfigError(f"problems file not found: {cfg.problems!r}")
    if not cfg.traces or not Path(cfg.traces).exists():
        raise ConfigError(f"traces file not found: {cfg.traces!r}")
    inputs = _digest_paths([Path(cfg.problems), Path(cfg.traces)])
    fingerprint = _fingerprint(inputs, {"domains": cfg.domains})
    outputs = [paths["problems"], paths["parsed_traces"]]
    skipped = _maybe_skip(cfg.out, "ingest", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = read_problems(cfg.problems)
    dropped: dict[str, str] = {}
    if cfg.domains:
        kept_problems = [p for p in problems if p.domain in cfg.domains]
        for p in problems:
            if p.domain not in cfg.domains:
                dropped[p.id] = "domain_excluded"
                log.info("dropped problem %s: domain_excluded", p.id)
        problems = kept_problems
    problem_ids = {p.id for p in problems}
    domain_of = {p.id: p.domain for p in problems}

    parsed = []
    n_raw = 0
    parse_failures = 0
    for obj in read_raw_traces(cfg.traces):
        n_raw += 1
        pid = obj["problem_id"]
        if pid not in problem_ids:
            continue
        trace = parse_trace(obj["raw_text"], domain_of[pid], problem_id=pid, trace_id=obj["trace_id"])
        if not trace.parse_ok:
            parse_failures += 1
        parsed.append(trace)
    write_problems(paths["problems"], problems)
    write_traces(paths["parsed_traces"], parsed)
    counts = {
        "problems_in": len(problems) + len(dropped),
        "problems_out": len(problems),
        "dropped_by_reason": _reason_counts(dropped),
        "dropped": dropped,
        "traces_in": n_raw,
        "traces_out": len(parsed),
        "parse_failures": parse_failures,
    }
    return _finish_stage(cfg.out, "ingest", fingerprint, inputs, outputs, counts)


def stage_validate(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "parsed_traces"], "validate")
    inputs = _digest_paths([paths["problems"], paths["parsed_traces"]])
    fingerprint = _fingerprint(inputs, {})
    outputs = [paths["validated_traces"], paths["pools"]]
    skipped = _maybe_skip(cfg.out, "validate", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = read_problems(paths["problems"])
    traces = read_traces(paths["parsed_traces"])
    by_problem: dict[str, list] = {}
    for t in traces:
        by_problem.setdefault(t.problem_id, []).append(t)

    pool_rows = []
    validator_errors = 0
    for problem in problems:
        problem_traces = by_problem.get(problem.id, [])
        validator = make_validator(problem)
        pool = build_answer_pool(problem, problem_traces, validator)
        validator_errors += len(pool.diagnostics)
        correct_keys = {normalize_answer(a, problem.domain) for a in pool.correct}
        for t in problem_traces:
            if t.parse_ok:
                t.correct = normalize_answer(t.final_answer, problem.domain) in correct_keys
        pool_rows.append(
            {
                "problem_id": pool.problem_id,
                "correct": pool.correct,
                "wrong": pool.wrong,
                "multiplicity": pool.multiplicity,
                "diagnostics": pool.diagnostics,
            }
        )
    write_traces(paths["validated_traces"], traces)
    write_jsonl(paths["pools"], pool_rows)
    counts = {
        "problems_in": len(problems),
        "problems_out": len(problems),
        "traces_validated": sum(1 for t in traces if t.correct is not None),
        "validator_errors": validator_errors,
    }
    return _finish_stage(cfg.out, "validate", fingerprint, inputs, outputs, counts)


def _read_pools(path: Path) -> dict[str, AnswerPool]:
    pools = {}
    for obj in read_jsonl(path):
        pools[obj["problem_id"]] = AnswerPool(
            problem_id=obj["problem_id"],
            correct=list(obj["correct"]),
            wrong=list(obj["wrong"]),
            multiplicity=dict(obj.get("multiplicity", {})),
            diagnostics=dict(obj.get("diagnostics", {})),
        )
    return pools


def stage_score(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "validated_traces", "pools"], "score")
    if not cfg.backend:
        raise ConfigError("no scoring backend configured (use --backend or the env override)")
    backend = make_backend(
        cfg.backend,
        cfg.cache_dir or None,
        timeout_s=cfg.backend_timeout_s,
        max_retries=cfg.backend_retries,
        backoff_s=cfg.backend_backoff_s,
    )
    inputs = _digest_paths([paths["problems"], paths["validated_traces"], paths["pools"]])
    fingerprint = _fingerprint(
        inputs,
        {"backend": backend.backend_id, "k_subsample": cfg.k_subsample, "seed": cfg.seed},
    )
    outputs = [paths["working_set"], paths["profiles"]]
    skipped = _maybe_skip(cfg.out, "score", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = read_problems(paths["problems"])
    traces = read_traces(paths["validated_traces"])
    pools = _read_pools(paths["pools"])
    by_problem: dict[str, list] = {}
    for t in traces:
        by_problem.setdefault(t.problem_id, []).append(t)

    result = filter_and_subsample(problems, by_problem, k=cfg.k_subsample, seed=cfg.seed)
    working_rows = []
    profile_rows = []
    scorings = 0
    for problem, kept_traces in result.kept:
        pool = pools[problem.id]
        answers = list(dict.fromkeys(pool.correct + pool.wrong + [problem.gold_answer]))
        working_rows.append({"problem_id": problem.id, "trace_ids": [t.trace_id for t in kept_traces]})
        for trace in kept_traces:
            profile = information_profile(
                problem, trace, answers, backend, max_workers=cfg.concurrency_limit
            )
            scorings += (len(trace.steps) + 1) * len(answers)
            profile_rows.append(profile.to_json_dict())
    write_jsonl(paths["working_set"], working_rows)
    write_jsonl(paths["profiles"], profile_rows)
    cache = getattr(backend, "cache", None)
    counts = {
        "problems_in": len(problems),
        "problems_out": len(result.kept),
        "dropped_by_reason": _reason_counts(result.dropped),
        "dropped": result.dropped,
        "traces_scored": len(profile_rows),
        "scorings": scorings,
        "cache_hits": cache.hits if cache else 0,
        "cache_misses": cache.misses if cache else 0,
        "cache_hit_rate": cache.hit_rate if cache else 0.0,
    }
    return _finish_stage(cfg.out, "score", fingerprint, inputs, outputs, counts)


def _resolve_thresholds(cfg: RunConfig) -> tuple[dict[str, float], str]:
    """Threshold table for labeling: explicit file, else the sweep output in
    the run directory, else an uncalibrated default of 0.0 per domain."""
    paths = artifact_paths(cfg.out)
    if cfg.thresholds_file:
        source = Path(cfg.thresholds_file)
        if not source.exists():
            raise ConfigError(f"thresholds file not found: {source}")
    elif paths["thresholds"].exists():
        source = paths["thresholds"]
    else:
        return {}, ""
    return json.loads(source.read_text(encoding="utf-8")), str(source)


def stage_signals(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "profiles", "pools"], "signals")
    inputs = _digest_paths([paths["problems"], paths["profiles"], paths["pools"]])
    fingerprint = _fingerprint(
        inputs,
        {"method": cfg.method, "aggregation": cfg.aggregation, "reference": cfg.reference},
    )
    outputs = [paths["signals"]]
    skipped = _maybe_skip(cfg.out, "signals", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = {p.id: p for p in read_problems(paths["problems"])}
    pools = _read_pools(paths["pools"])
    rows = []
    dropped: dict[str, str] = {}
    profile_problems: set[str] = set()
    for obj in read_jsonl(paths["profiles"]):
        profile = InformationProfile.from_json_dict(obj)
        profile_problems.add(profile.problem_id)
        problem = problems[profile.problem_id]
        if cfg.method == "mcnig":
            pool = pools[profile.problem_id]
            if not pool.correct:
                if profile.problem_id not in dropped:
                    dropped[profile.problem_id] = "no_correct_answers_in_pool"
                    log.info("dropped problem %s: no_correct_answers_in_pool", profile.problem_id)
                continue
            signal = mcnig_signal(profile, pool, cfg.aggregation, cfg.reference)
        else:
            signal = ig_signal(profile, problem.gold_answer)
        rows.append(signal.to_json_dict())
    write_jsonl(paths["signals"], rows)
    counts = {
        "problems_in": len(profile_problems),
        "problems_out": len(profile_problems) - len(dropped),
        "dropped_by_reason": _reason_counts(dropped),
        "dropped": dropped,
        "traces_signaled": len(rows),
    }
    return _finish_stage(cfg.out, "signals", fingerprint, inputs, outputs, counts)


def stage_label(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "signals"], "label")
    thresholds, thresholds_source = _resolve_thresholds(cfg)
    digest_list = [paths["problems"], paths["signals"]]
    if thresholds_source:
        digest_list.append(Path(thresholds_source))
    inputs = _digest_paths(digest_list)
    fingerprint = _fingerprint(inputs, {})
    outputs = [paths["step_labels"]]
    skipped = _maybe_skip(cfg.out, "label", fingerprint, cfg.force)
    if skipped:
        return skipped

    domain_of = {p.id: p.domain for p in read_problems(paths["problems"])}
    rows = []
    for obj in read_jsonl(paths["signals"]):
        signal = StepSignal.from_json_dict(obj)
        tau = thresholds.get(domain_of[signal.problem_id], 0.0)
        labels = assign_labels(signal, tau)
        row = signal.to_json_dict()
        row["labels"] = labels.labels
        row["threshold"] = tau
        rows.append(row)
    write_jsonl(paths["step_labels"], rows)
    counts = {
        "traces_labeled": len(rows),
        "thresholds_source": thresholds_source or "default:0.0",
    }
    return _finish_stage(cfg.out, "label", fingerprint, inputs, outputs, counts)


def stage_sweep(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "signals", "validated_traces"], "sweep")
    inputs = _digest_paths([paths["problems"], paths["signals"], paths["validated_traces"]])
    fingerprint = _fingerprint(inputs, {"grid_size": cfg.grid_size})
    outputs = [paths["sweep"], paths["thresholds"]]
    skipped = _maybe_skip(cfg.out, "sweep", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = {p.id: p for p in read_problems(paths["problems"])}
    truth_of = {
        (t.problem_id, t.trace_id): int(bool(t.correct))
        for t in read_traces(paths["validated_traces"])
        if t.correct is not None
    }
    by_domain: dict[str, tuple[list[StepSignal], list[int]]] = {}
    for obj in read_jsonl(paths["signals"]):
        signal = StepSignal.from_json_dict(obj)
        key = (signal.problem_id, signal.trace_id)
        if key not in truth_of:
            raise DataError(f"no validation outcome for trace {key}")
        domain = problems[signal.problem_id].domain
        signals, truths = by_domain.setdefault(domain, ([], []))
        signals.append(signal)
        truths.append(truth_of[key])

    reports = []
    thresholds: dict[str, float] = {}
    for domain in sorted(by_domain):
        signals, truths = by_domain[domain]
        pooled = [v for s in signals for v in s.values]
        grid = percentile_grid(pooled, cfg.grid_size)
        try:
            sweep = sweep_threshold(signals, truths, grid, domain=domain)
        except UndefinedMetricError as exc:
            log.warning("sweep skipped for domain %s: %s", domain, exc)
            reports.append({"domain": domain, "skipped": True, "reason": str(exc)})
            continue
        reports.append(sweep.to_json_dict())
        thresholds[domain] = sweep.best_threshold
    atomic_write_text(paths["sweep"], json.dumps({"domains": reports}, ensure_ascii=False, indent=1))
    atomic_write_text(paths["thresholds"], json.dumps(thresholds, ensure_ascii=False, indent=1))
    counts = {
        "domains_swept": len(thresholds),
        "domains_skipped": len(reports) - len(thresholds),
        "best_thresholds": thresholds,
    }
    return _finish_stage(cfg.out, "sweep", fingerprint, inputs, outputs, counts)


def _emit_common(cfg: RunConfig, which: str) -> dict:
    paths = artifact_paths(cfg.out)
    needed = ["problems", "validated_traces", "working_set"]
    if which == "prm":
        needed.append("step_labels")
    _require(paths, needed, f"emit-{which}")
    inputs = _digest_paths([paths[n] for n in needed])
    fingerprint = _fingerprint(inputs, {"split": cfg.split, "shard_size": cfg.shard_size})
    out_dir = paths[f"{which}_dir"]
    stage_name = f"emit_{which}"
    skipped = _maybe_skip(cfg.out, stage_name, fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = {p.id: p for p in read_problems(paths["problems"])}
    traces = {(t.problem_id, t.trace_id): t for t in read_traces(paths["validated_traces"])}
    working: list[tuple[str, str]] = []
    for obj in read_jsonl(paths["working_set"]):
        for trace_id in obj["trace_ids"]:
            working.append((obj["problem_id"], trace_id))

    records = []
    dropped: dict[str, str] = {}
    if which == "prm":
        for obj in read_jsonl(paths["step_labels"]):
            labels = StepLabels.from_json_dict(obj)
            problem = problems[labels.problem_id]
            trace = traces[(labels.problem_id, labels.trace_id)]
            try:
                records.append(emit_prm_record(problem, trace, labels))
            except ReservedSymbolError as exc:
                dropped[labels.trace_id] = exc.reason_code
                log.info("dropped trace %s: %s", labels.trace_id, exc.reason_code)
    else:
        for pid, trace_id in working:
            trace = traces[(pid, trace_id)]
            try:
                records.append(emit_orm_record(problems[pid], trace))
            except ReservedSymbolError as exc:
                dropped[trace_id] = exc.reason_code
                log.info("dropped trace %s: %s", trace_id, exc.reason_code)

    tmp_dir = out_dir.with_name(out_dir.name + ".tmp")
    if tmp_dir.exists():
        for child in tmp_dir.iterdir():
            child.unlink()
        tmp_dir.rmdir()
    shard_paths = write_shards(records, tmp_dir, cfg.split, cfg.shard_size)
    if out_dir.exists():
        for child in out_dir.iterdir():
            child.unlink()
        out_dir.rmdir()
    tmp_dir.rename(out_dir)
    shard_paths = [out_dir / p.name for p in shard_paths]

    balance = label_balance(records)
    counts = {
        "records": len(records),
        "traces_in": len(working),
        "dropped_by_reason": _reason_counts(dropped),
        "dropped": dropped,
        "balance": balance,
        "shards": [str(p) for p in shard_paths],
    }
    return _finish_stage(cfg.out, stage_name, fingerprint, inputs, shard_paths, counts)


def stage_emit_prm(cfg: RunConfig) -> dict:
    return _emit_common(cfg, "prm")


def stage_emit_orm(cfg: RunConfig) -> dict:
    return _emit_common(cfg, "orm")


def stage_emit(cfg: RunConfig) -> dict:
    prm = stage_emit_prm(cfg)
    orm = stage_emit_orm(cfg)
    report = {
        "name": "emit",
        "fingerprint": prm["fingerprint"] + orm["fingerprint"],
        "inputs": {**prm["inputs"], **orm["inputs"]},
        "outputs": prm["outputs"] + orm["outputs"],
        "counts": {"prm": prm["counts"], "orm": orm["counts"]},
        "skipped": prm["skipped"] and orm["skipped"],
    }
    paths = artifact_paths(cfg.out)
    balance = {
        "prm": prm["counts"]["balance"],
        "orm": orm["counts"]["balance"],
    }
    atomic_write_text(paths["emit_report"], json.dumps(balance, ensure_ascii=False, indent=1))
    return report


def _build_scorer(cfg: RunConfig, paths: dict[str, Path]):
    name = cfg.eval_scorer
    if name == "oracle":
        return oracle_scorer(lambda problem, answer: make_validator(problem)(answer))
    if name == "random":
        return random_scorer(cfg.seed)
    if name == "label-product":
        _require(paths, ["step_labels"], "eval")
        table = {
            (obj["problem_id"], obj["trace_id"]): [int(v) for v in obj["labels"]]
            for obj in read_jsonl(paths["step_labels"])
        }
        return label_product_scorer(table)
    if name in ("step-product", "orm"):
        if not cfg.step_scores:
            raise ConfigError(f"scorer {name!r} needs --step-scores with per-trace probabilities")
        table = {
            (obj["problem_id"], obj["trace_id"]): [float(v) for v in obj["step_probs"]]
            for obj in read_jsonl(cfg.step_scores)
        }
        scorer = step_product_scorer(table)
        scorer.scorer_id = name
        return scorer
    raise ConfigError(f"unknown scorer {name!r}; choose from {EVAL_SCORERS}")


def stage_eval(cfg: RunConfig) -> dict:
    paths = artifact_paths(cfg.out)
    _require(paths, ["problems", "validated_traces"], "eval")
    digest_list = [paths["problems"], paths["validated_traces"]]
    if cfg.eval_scorer == "label-product" and paths["step_labels"].exists():
        digest_list.append(paths["step_labels"])
    if cfg.step_scores:
        digest_list.append(Path(cfg.step_scores))
    inputs = _digest_paths(digest_list)
    fingerprint = _fingerprint(inputs, {"scorer": cfg.eval_scorer, "k": cfg.eval_k, "seed": cfg.seed})
    outputs = [paths["eval_report"]]
    skipped = _maybe_skip(cfg.out, "eval", fingerprint, cfg.force)
    if skipped:
        return skipped

    problems = read_problems(paths["problems"])
    candidates: dict[str, list] = {}
    for t in read_traces(paths["validated_traces"]):
        candidates.setdefault(t.problem_id, []).append(t)
    problems = [p for p in problems if candidates.get(p.id)]

    def outcome_validator(problem: Problem, answer: str) -> int:
        try:
            return make_validator(problem)(answer)
        except ValidatorError as exc:
            log.warning("validator error during eval on %s: %s", problem.id, exc)
            return 0

    if cfg.eval_scorer == "majority":
        report = majority_best_of_k(problems, candidates, cfg.eval_k, outcome_validator)
    else:
        scorer = _build_scorer(cfg, paths)
        report = best_of_k(problems, candidates, scorer, cfg.eval_k, outcome_validator)
    atomic_write_text(paths["eval_report"], json.dumps(report.to_json_dict(), ensure_ascii=False, indent=1))
    counts = {
        "problems_in": len(problems),
        "problems_out": len(problems),
        "K": report.k,
        "scorer": report.scorer_id,
        "accuracy": report.accuracy,
    }
    return _finish_stage(cfg.out, "eval", fingerprint, inputs, outputs, counts)


def _reason_counts(dropped: dict[str, str]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for reason in dropped.values():
        counts[reason] = counts.get(reason, 0) + 1
    return counts


_STAGE_RUNNERS = {
    "ingest": stage_ingest,
    "validate": stage_validate,
    "score": stage_score,
    "signals": stage_signals,
    "sweep": stage_sweep,
    "label": stage_label,
    "emit": stage_emit,
    "eval": stage_eval,
}


def run_pipeline(cfg: RunConfig, stages: list[str] | None = None) -> dict:
    """Execute the requested stages in order and write the run manifest.

    With no explicit stage list the full sequence runs: thresholds are
    calibrated from the signals before labels are assigned, so emitted
    datasets use calibrated labels. Re-running with identical inputs and
    config skips up-to-date stages.
    """
    sequence = list(stages) if stages else list(FULL_SEQUENCE)
    for name in sequence:
        if name not in _STAGE_RUNNERS:
            raise ConfigError(f"unknown stage {name!r}; choose from {STAGES}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in sequence:
        log.info("running stage %s", name)
        reports.append(_STAGE_RUNNERS[name](cfg))
    manifest = {
        "toolkit_version": __version__,
        "created_unix": time.time(),
        "config": cfg.snapshot(),
        "stages": reports,
    }
    atomic_write_text(
        artifact_paths(cfg.out)["manifest"], json.dumps(manifest, ensure_ascii=False, indent=1)
    )
    return manifest


def summarize_run(out_dir: str | Path) -> str:
    """Human-readable accounting of a finished run."""
    manifest_path = artifact_paths(Path(out_dir))["manifest"]
    if not manifest_path.exists():
        raise ConfigError(f"no run manifest under {out_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    lines = [f"run of steplab {manifest['toolkit_version']}"]
    for report in manifest["stages"]:
        counts = report.get("counts", {})
        status = "skipped" if report.get("skipped") else "ran"
        parts = [f"{report['name']}: {status}"]
        if "problems_in" in counts:
            parts.append(f"problems {counts['problems_in']} -> {counts.get('problems_out', '?')}")
        reasons = counts.get("dropped_by_reason") or {}
        if reasons:
            parts.append("dropped " + ", ".join(f"{r}={n}" for r, n in sorted(reasons.items())))
        if "cache_hit_rate" in counts:
            parts.append(f"cache hit rate {counts['cache_hit_rate']:.1%}")
        if "accuracy" in counts:
            parts.append(f"accuracy {counts['accuracy']:.4f}")
        lines.append("  " + " | ".join(parts))
    return "\n".join(lines)
