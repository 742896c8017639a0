"""Command-line front end.

Stage subcommands operate on a run directory and can be re-run
individually from persisted artifacts; ``run`` executes the whole
pipeline. Exit codes: 0 ok, 2 config error, 3 data error, 4 backend
error, 5 validator infrastructure error, 1 anything else.
"""

import argparse
import json
import logging
from pathlib import Path

from .analysis import (
    ComplexityParams,
    SubsampleStudy,
    exhaustive_bias,
    subsample_bias_variance,
    tokens_mathshepherd,
    tokens_mcnig,
    tokens_omegaprm,
)
from .errors import ConfigError, ToolkitError
from .ioutil import atomic_write_text
from .pipeline import (
    EVAL_SCORERS,
    load_config,
    run_pipeline,
    stage_emit_orm,
    stage_emit_prm,
    stage_eval,
    stage_ingest,
    stage_label,
    stage_score,
    stage_signals,
    stage_sweep,
    stage_validate,
    summarize_run,
)

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steplab", description=__doc__)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--backend", default=None, help="backend URL or reference:<fixture path>")
    parser.add_argument("--cache-dir", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--force", action="store_true", help="re-run even if up to date")
        return p

    p = stage_parser("ingest", "parse raw traces into steps and answers")
    p.add_argument("--problems", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--domains", default=None, help="comma-separated domain filter")

    stage_parser("validate", "validate answers and build answer pools")

    p = stage_parser("score", "filter, subsample, and score information profiles")
    p.add_argument("--k-subsample", type=int, default=None)
    p.add_argument("--concurrency", type=int, default=None, dest="concurrency_limit")

    p = stage_parser("label", "compute step signals and thresholded labels")
    p.add_argument("--method", choices=["ig", "mcnig"], default=None)
    p.add_argument("--aggregation", choices=["max", "mean"], default=None)
    p.add_argument("--reference", choices=["step0", "previous"], default=None)
    p.add_argument("--thresholds", default=None, dest="thresholds_file")

    p = stage_parser("sweep", "calibrate per-domain thresholds by balanced accuracy")
    p.add_argument("--grid-size", type=int, default=None)

    for name in ("emit-prm", "emit-orm"):
        p = stage_parser(name, f"write {name.split('-')[1]} training records")
        p.add_argument("--split", default=None)
        p.add_argument("--shard-size", type=int, default=None)

    p = stage_parser("eval-bok", "best-of-K evaluation")
    p.add_argument("--scorer", choices=list(EVAL_SCORERS), default=None, dest="eval_scorer")
    p.add_argument("--k", type=int, default=None, dest="eval_k")
    p.add_argument("--step-scores", default=None, dest="step_scores")

    p = stage_parser("run", "run the full pipeline end to end")
    p.add_argument("--problems", default=None)
    p.add_argument("--traces", default=None)
    p.add_argument("--domains", default=None)
    p.add_argument("--k-subsample", type=int, default=None)
    p.add_argument("--method", choices=["ig", "mcnig"], default=None)
    p.add_argument("--aggregation", choices=["max", "mean"], default=None)
    p.add_argument("--reference", choices=["step0", "previous"], default=None)
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--scorer", choices=list(EVAL_SCORERS), default=None, dest="eval_scorer")
    p.add_argument("--k", type=int, default=None, dest="eval_k")
    p.add_argument("--stages", default=None, help="comma-separated stage subset")

    p = sub.add_parser("analyze-complexity", help="token-cost formulas for labeling strategies")
    p.add_argument("--n", type=int, required=True, help="number of reasoning steps")
    p.add_argument("--s-bar", type=float, required=True, help="average tokens per step")
    p.add_argument("--m", type=int, default=1, help="rollouts per prefix")
    p.add_argument("--big-s", type=int, default=1, help="sampled candidate answers")
    p.add_argument("--t", type=float, default=1.0, help="average answer tokens")
    p.add_argument("--q-len", type=float, default=0.0, help="question tokens")
    p.add_argument("--natural-log", action="store_true", help="use ln instead of log2 for binary search")
    p.add_argument("--out", default=None, help="write the report JSON here")

    p = sub.add_parser("analyze-bias", help="subsampled-max bias and variance study")
    p.add_argument("--pool-file", required=True, help="JSON array of values, or one value per line")
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--replicates", type=int, default=10000)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--out-dir", required=True)

    return parser


# label and sweep both need the signal values, so they compute them first
# (a no-op when signals are up to date).
_STAGE_COMMANDS = {
    "ingest": (stage_ingest,),
    "validate": (stage_validate,),
    "score": (stage_score,),
    "label": (stage_signals, stage_label),
    "sweep": (stage_signals, stage_sweep),
    "emit-prm": (stage_emit_prm,),
    "emit-orm": (stage_emit_orm,),
    "eval-bok": (stage_eval,),
}

_CONFIG_KEYS = (
    "problems",
    "traces",
    "out_dir",
    "seed",
    "backend",
    "cache_dir",
    "k_subsample",
    "concurrency_limit",
    "method",
    "aggregation",
    "reference",
    "thresholds_file",
    "grid_size",
    "split",
    "shard_size",
    "eval_scorer",
    "eval_k",
    "step_scores",
    "force",
)


def _config_from_args(args: argparse.Namespace):
    overrides = {}
    for key in _CONFIG_KEYS:
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    domains = getattr(args, "domains", None)
    if domains:
        overrides["domains"] = [d.strip() for d in domains.split(",") if d.strip()]
    if getattr(args, "force", False):
        overrides["force"] = True
    return load_config(config_file=args.config, overrides=overrides)


def _load_pool_file(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise ConfigError(f"pool file {path} is empty")
    if text.startswith("["):
        return [float(v) for v in json.loads(text)]
    return [float(line) for line in text.splitlines() if line.strip()]


def _emit_report(report: dict, out: str | None) -> None:
    text = json.dumps(report, ensure_ascii=False, indent=1)
    if out:
        atomic_write_text(out, text)
    print(text)


def _cmd_analyze_complexity(args: argparse.Namespace) -> int:
    params = ComplexityParams(
        steps=args.n,
        tokens_per_step=args.s_bar,
        rollouts_per_prefix=args.m,
        sampled_answers=args.big_s,
        answer_tokens=args.t,
        question_tokens=args.q_len,
    )
    report = {
        "params": {
            "steps": params.steps,
            "tokens_per_step": params.tokens_per_step,
            "rollouts_per_prefix": params.rollouts_per_prefix,
            "sampled_answers": params.sampled_answers,
            "answer_tokens": params.answer_tokens,
            "question_tokens": params.question_tokens,
        },
        "tokens": {
            "mathshepherd": tokens_mathshepherd(params),
            "omegaprm": tokens_omegaprm(params, natural_log=args.natural_log) if params.steps >= 2 else None,
            "mcnig": tokens_mcnig(params),
        },
        "log_base": "e" if args.natural_log else "2",
    }
    _emit_report(report, args.out)
    return 0


def _cmd_analyze_bias(args: argparse.Namespace, seed: int) -> int:
    pool = _load_pool_file(args.pool_file)
    if args.exhaustive:
        bias, variance = exhaustive_bias(pool, args.s)
        study = SubsampleStudy(pool=pool, s=args.s, replicates=0, bias=bias, variance=variance, exact=True)
    else:
        study = subsample_bias_variance(pool, args.s, args.replicates, seed=seed)
    _emit_report(study.to_json_dict(), args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze-complexity":
            return _cmd_analyze_complexity(args)
        if args.command == "analyze-bias":
            return _cmd_analyze_bias(args, seed=args.seed if args.seed is not None else 0)
        if args.command == "report":
            print(summarize_run(args.out_dir))
            return 0
        cfg = _config_from_args(args)
        if args.command == "run":
            stages = None
            if args.stages:
                stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            run_pipeline(cfg, stages=stages)
            print(summarize_run(cfg.out_dir))
            return 0
        for stage_fn in _STAGE_COMMANDS[args.command]:
            report = stage_fn(cfg)
            status = "skipped (up to date)" if report.get("skipped") else "done"
            print(f"{report['name']}: {status}")
        return 0
    except ToolkitError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return 3
    except Exception as exc:  # noqa: BLE001
        log.error("internal error: %s", exc, exc_info=True)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
