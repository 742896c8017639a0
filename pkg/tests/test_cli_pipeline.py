import json

import pytest

from steplab.cli import main
from steplab.errors import ConfigError
from steplab.fixtures import build_demo_corpus
from steplab.pipeline import (
    RunConfig,
    artifact_paths,
    load_config,
    parse_config_file,
    run_pipeline,
    stage_score,
    summarize_run,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return build_demo_corpus(root, n_problems=8, traces_per_problem=4)


def config_for(small_corpus, tmp_path, out="run", **kw):
    values = dict(
        problems=str(small_corpus["problems"]),
        traces=str(small_corpus["traces"]),
        out_dir=str(tmp_path / out),
        backend=f"reference:{small_corpus['reference_model']}",
        cache_dir=str(tmp_path / "cache"),
        seed=3,
    )
    values.update(kw)
    return RunConfig(**values)


class TestConfig:
    def test_parse_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# a comment\n"
            'backend = "reference:model.json"\n'
            "seed = 11\n"
            "k_subsample = 4\n"
            "domains = math, sql\n"
            "force = true\n"
        )
        values = parse_config_file(path)
        assert values == {
            "backend": "reference:model.json",
            "seed": 11,
            "k_subsample": 4,
            "domains": ["math", "sql"],
            "force": True,
        }

    def test_env_overrides_file_and_cli_overrides_env(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text('backend = "reference:from-file.json"\ncache_dir = "file-cache"\n')
        env = {"STEPLAB_BACKEND_URL": "http://from-env:8000"}
        cfg = load_config(config_file=str(path), env=env)
        assert cfg.backend == "http://from-env:8000"
        assert cfg.cache_dir == "file-cache"
        cfg = load_config(config_file=str(path), env=env, overrides={"backend": "http://cli:1"})
        assert cfg.backend == "http://cli:1"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("no_such_option = 1\n")
        with pytest.raises(ConfigError):
            load_config(config_file=str(path))

    def test_bad_enum_values_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(method="guess")
        with pytest.raises(ConfigError):
            RunConfig(aggregation="median")


class TestStageIsolation:
    def test_score_without_upstream_artifacts(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        with pytest.raises(ConfigError, match="upstream"):
            stage_score(cfg)

    def test_stage_rerun_from_persisted_artifacts(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        run_pipeline(cfg, stages=["ingest", "validate", "score", "signals"])
        # sweep alone, then label alone, from what is on disk.
        sweep_report = run_pipeline(cfg, stages=["sweep"])["stages"][0]
        assert not sweep_report["skipped"]
        label_report = run_pipeline(cfg, stages=["label"])["stages"][0]
        assert not label_report["skipped"]
        assert artifact_paths(cfg.out)["step_labels"].exists()

    def test_unknown_stage_rejected(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        with pytest.raises(ConfigError):
            run_pipeline(cfg, stages=["fly"])


class TestPipeline:
    def test_full_run_emits_everything(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        manifest = run_pipeline(cfg)
        paths = artifact_paths(cfg.out)
        for name in ("signals", "step_labels", "sweep", "thresholds", "eval_report"):
            assert paths[name].exists()
        assert list(paths["prm_dir"].glob("train-*.jsonl"))
        assert list(paths["orm_dir"].glob("train-*.jsonl"))
        stage_names = [s["name"] for s in manifest["stages"]]
        assert stage_names == ["ingest", "validate", "score", "signals", "sweep", "label", "emit", "eval"]

    def test_manifest_accounting_identity(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        manifest = run_pipeline(cfg)
        for stage in manifest["stages"]:
            counts = stage.get("counts", {})
            if "problems_in" in counts and "dropped_by_reason" in counts:
                dropped_total = sum(counts["dropped_by_reason"].values())
                assert counts["problems_in"] == counts["problems_out"] + dropped_total

    def test_rerun_same_dir_skips_all_stages(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        run_pipeline(cfg)
        again = run_pipeline(cfg)
        assert all(s["skipped"] for s in again["stages"])

    def test_fresh_dir_reproduces_every_artifact_byte_for_byte(self, small_corpus, tmp_path):
        cfg1 = config_for(small_corpus, tmp_path, out="byte1")
        cfg2 = config_for(small_corpus, tmp_path, out="byte2")
        run_pipeline(cfg1)
        run_pipeline(cfg2)
        p1, p2 = artifact_paths(cfg1.out), artifact_paths(cfg2.out)
        for name in (
            "problems", "parsed_traces", "validated_traces", "pools",
            "working_set", "profiles", "signals", "step_labels",
            "sweep", "thresholds", "eval_report",
        ):
            assert p1[name].read_bytes() == p2[name].read_bytes(), name

    def test_concurrent_scoring_matches_sequential(self, small_corpus, tmp_path):
        sequential = config_for(small_corpus, tmp_path, out="seq")
        concurrent = config_for(small_corpus, tmp_path, out="par", concurrency_limit=4)
        run_pipeline(sequential)
        run_pipeline(concurrent)
        p1, p2 = artifact_paths(sequential.out), artifact_paths(concurrent.out)
        for name in ("profiles", "signals", "step_labels"):
            assert p1[name].read_bytes() == p2[name].read_bytes(), name

    def test_force_reruns(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path)
        run_pipeline(cfg)
        forced = config_for(small_corpus, tmp_path, force=True)
        again = run_pipeline(forced)
        assert not any(s["skipped"] for s in again["stages"])

    def test_unreachable_backend_fails_without_partial_labels(self, small_corpus, tmp_path):
        cfg = config_for(small_corpus, tmp_path, backend="http://127.0.0.1:9")
        from steplab.errors import BackendError

        with pytest.raises(BackendError):
            run_pipeline(cfg)
        paths = artifact_paths(cfg.out)
        assert not paths["profiles"].exists()
        assert not paths["signals"].exists()
        assert not paths["step_labels"].exists()

    def test_threshold_file_override(self, small_corpus, tmp_path):
        thresholds = tmp_path / "my_thresholds.json"
        thresholds.write_text(json.dumps({"math": 99.0, "qa": 99.0}))
        cfg = config_for(small_corpus, tmp_path, thresholds_file=str(thresholds))
        run_pipeline(cfg, stages=["ingest", "validate", "score", "signals", "label"])
        rows = [
            json.loads(line)
            for line in artifact_paths(cfg.out)["step_labels"].read_text().splitlines()
        ]
        assert all(row["threshold"] == 99.0 for row in rows)
        assert all(l == 0 for row in rows for l in row["labels"])


class TestCli:
    def test_stage_subcommands_chain(self, small_corpus, tmp_path, capsys):
        out = tmp_path / "cli-run"
        base = ["--backend", f"reference:{small_corpus['reference_model']}", "--cache-dir", str(tmp_path / "cache")]
        assert main(base + [
            "ingest", "--out-dir", str(out),
            "--problems", str(small_corpus["problems"]),
            "--traces", str(small_corpus["traces"]),
        ]) == 0
        assert main(base + ["validate", "--out-dir", str(out)]) == 0
        assert main(base + ["score", "--out-dir", str(out)]) == 0
        assert main(base + ["label", "--out-dir", str(out)]) == 0
        assert main(base + ["sweep", "--out-dir", str(out)]) == 0
        assert main(base + ["emit-prm", "--out-dir", str(out)]) == 0
        assert main(base + ["emit-orm", "--out-dir", str(out)]) == 0
        assert main(base + ["eval-bok", "--out-dir", str(out), "--scorer", "oracle", "--k", "4"]) == 0
        assert (out / "eval_report.json").exists()

    def test_run_and_report(self, small_corpus, tmp_path, capsys):
        out = tmp_path / "cli-full"
        code = main([
            "--backend", f"reference:{small_corpus['reference_model']}",
            "--cache-dir", str(tmp_path / "cache"),
            "run", "--out-dir", str(out),
            "--problems", str(small_corpus["problems"]),
            "--traces", str(small_corpus["traces"]),
        ])
        assert code == 0
        assert main(["report", "--out-dir", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "cache hit rate" in captured

    def test_backend_error_exit_code(self, small_corpus, tmp_path):
        out = tmp_path / "cli-bad"
        main([
            "score", "--out-dir", str(out),
        ])  # missing artifacts: config error
        code = main([
            "--backend", "http://127.0.0.1:9",
            "run", "--out-dir", str(out),
            "--problems", str(small_corpus["problems"]),
            "--traces", str(small_corpus["traces"]),
        ])
        assert code == 4

    def test_config_error_exit_code(self, tmp_path):
        assert main(["score", "--out-dir", str(tmp_path / "nowhere")]) == 2

    def test_analyze_complexity_output(self, capsys):
        code = main([
            "analyze-complexity", "--n", "100", "--s-bar", "30", "--m", "8",
            "--big-s", "16", "--t", "20", "--q-len", "60",
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["tokens"]["mathshepherd"] == 1_188_000
        assert report["tokens"]["mcnig"] == 35_380
        assert abs(report["tokens"]["omegaprm"] - 79_726.27) < 0.1

    def test_analyze_bias_exhaustive(self, tmp_path, capsys):
        pool_file = tmp_path / "pool.json"
        pool_file.write_text("[1, 2, 3]")
        code = main(["analyze-bias", "--pool-file", str(pool_file), "--s", "2", "--exhaustive"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["bias"] == pytest.approx(-1 / 3)
        assert report["variance"] == pytest.approx(2 / 9)
        assert report["exact"] is True

    def test_analyze_bias_monte_carlo(self, tmp_path, capsys):
        pool_file = tmp_path / "pool.txt"
        pool_file.write_text("1\n2\n3\n")
        code = main([
            "--seed", "7",
            "analyze-bias", "--pool-file", str(pool_file), "--s", "2", "--replicates", "4000",
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["exact"] is False
        assert abs(report["bias"] - (-1 / 3)) < 0.05

    def test_eval_bok_with_external_step_scores(self, small_corpus, tmp_path, capsys):
        out = tmp_path / "cli-scores"
        base = [
            "--backend", f"reference:{small_corpus['reference_model']}",
            "--cache-dir", str(tmp_path / "cache"),
        ]
        for cmd in (["ingest", "--out-dir", str(out),
                     "--problems", str(small_corpus["problems"]),
                     "--traces", str(small_corpus["traces"])],
                    ["validate", "--out-dir", str(out)]):
            assert main(base + cmd) == 0
        # External per-step probabilities: favorable for every trace.
        rows = []
        for line in (out / "validated_traces.jsonl").read_text().splitlines():
            obj = json.loads(line)
            rows.append(
                json.dumps(
                    {
                        "problem_id": obj["problem_id"],
                        "trace_id": obj["trace_id"],
                        "step_probs": [0.9] * len(obj["steps"]),
                    }
                )
            )
        scores_file = tmp_path / "step_scores.jsonl"
        scores_file.write_text("\n".join(rows) + "\n")
        code = main(base + [
            "eval-bok", "--out-dir", str(out),
            "--scorer", "step-product", "--k", "4", "--step-scores", str(scores_file),
        ])
        assert code == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["scorer_id"] == "step-product"
        assert 0.0 <= report["accuracy"] <= 1.0


class TestSummarize:
    def test_missing_manifest_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            summarize_run(tmp_path)
