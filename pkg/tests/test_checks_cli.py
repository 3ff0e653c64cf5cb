import dataclasses

import numpy as np
import pytest
import yaml

from prelax import checks, evaluation, losses
from prelax.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    OUTPUT_DIR_ENV,
    ConfigError,
    DatasetSpec,
    EvalSpec,
    RunConfig,
    _stratified_table,
    load_run_config,
    main,
    resolved_config_dict,
    write_snapshot,
)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


class TestChecks:
    def test_fast_suite_passes(self):
        results = checks.run_all_checks(fast=True)
        assert all(r.passed for r in results)
        names = [r.name for r in results]
        assert names == [
            "r2s-reduction-identity",
            "r2s-representation-identity",
            "rotation-group",
            "target-detachment-ema",
            "gradient-consistency",
        ]

    def test_details_state_the_tolerance(self):
        r = checks.check_reduction_identity(trials=10)
        assert r.passed and "tol" in r.detail

    def test_injected_sign_fault_is_caught(self):
        # the sign fault flips the alpha-scaled correction, so it is
        # invisible at alpha=0 and must be caught by the alpha=1 identity
        with losses.inject_fault("r2s_sign"):
            assert checks.check_reduction_identity(trials=10).passed
            r = checks.check_representation_identity(trials=10)
        assert not r.passed
        assert checks.check_representation_identity(trials=10).passed

    def test_representation_identity_tolerance(self):
        r = checks.check_representation_identity(trials=50)
        assert r.passed

    def test_gradient_check_single_objective(self):
        r = checks.check_gradient_consistency(objectives=["simsiam_dual"])
        assert r.passed
        assert "simsiam_dual" in r.detail


class TestConfigLoading:
    def test_defaults_without_file(self):
        cfg, tree = load_run_config(None, [])
        assert cfg.output_dir == "runs/prelax"
        assert cfg.train.variant == "prelax_std"
        assert tree == {}

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config("/nonexistent/run.yaml", [])

    def test_yaml_file_round_trip(self, tmp_path):
        payload = {
            "output_dir": str(tmp_path / "out"),
            "dataset": {"n": 64, "size": 16},
            "train": {
                "epochs": 3,
                "model": {"backbone": "mlp", "image_size": 16, "norm": "none"},
                "augment": {"out_size": 16, "crop_scale": [0.6, 1.0]},
            },
        }
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(payload))
        cfg, _ = load_run_config(str(path), [])
        assert cfg.train.epochs == 3
        assert cfg.train.model.norm == "none"
        assert cfg.train.augment.crop_scale == (0.6, 1.0)
        assert cfg.dataset.n == 64

    def test_malformed_yaml_is_config_error(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train: [unclosed")
        with pytest.raises(ConfigError, match="could not parse"):
            load_run_config(str(path), [])

    def test_non_mapping_top_level_rejected(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_run_config(str(path), [])

    def test_unknown_key_names_the_path(self):
        with pytest.raises(ConfigError, match="train.optimizer"):
            load_run_config(None, ["train.optimizer=adam"])

    def test_bare_keys_address_the_train_section(self):
        cfg, _ = load_run_config(None, ["epochs=7", "variant=prelax_std"])
        assert cfg.train.epochs == 7
        assert cfg.train.variant == "prelax_std"

    def test_set_without_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            load_run_config(None, ["epochs"])

    def test_env_var_sets_output_dir(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/env-run")
        cfg, _ = load_run_config(None, [])
        assert cfg.output_dir == "/tmp/env-run"

    def test_set_override_beats_env(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/env-run")
        cfg, _ = load_run_config(None, ["output_dir=/tmp/cli-run"])
        assert cfg.output_dir == "/tmp/cli-run"

    def test_invalid_field_value_is_config_error(self):
        with pytest.raises(ConfigError, match="invalid train"):
            load_run_config(None, ["train.epochs=0"])


class TestSpecs:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "imagenet"},
            {"kind": "cifar"},
            {"split": "validation"},
        ],
    )
    def test_dataset_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            DatasetSpec(**kwargs)

    def test_class_count_defaults(self):
        assert DatasetSpec().class_count() == 4
        assert DatasetSpec(kind="cifar", path="x").class_count() == 10
        assert DatasetSpec(classes=6).class_count() == 6

    def test_synthetic_build_respects_fields(self):
        ds = DatasetSpec(n=32, size=16, seed=9).build()
        assert ds.images.shape == (32, 3, 16, 16)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"mode": "zero_shot"},
            {"pooling": "cls"},
            {"k": 0},
            {"queries": 0},
            {"labels_per_class": 0},
        ],
    )
    def test_eval_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            EvalSpec(**kwargs)

    def test_test_dataset_spec_shifts_seed_and_halves(self):
        cfg = RunConfig(dataset=DatasetSpec(n=100, seed=3))
        test = cfg.test_dataset_spec()
        assert test.seed == 4
        assert test.n == 48

    def test_explicit_test_spec_wins(self):
        explicit = DatasetSpec(n=16, seed=11)
        cfg = RunConfig(eval=EvalSpec(test=explicit))
        assert cfg.test_dataset_spec() is explicit

    def test_stratified_table_missing_class(self):
        table = evaluation.EmbeddingTable(
            np.arange(4, dtype=np.uint64),
            np.zeros(4, dtype=np.int32),
            np.random.default_rng(0).random((4, 3)).astype(np.float32),
        )
        with pytest.raises(ConfigError, match="class 1"):
            _stratified_table(table, 2, 2, seed=0)

    def test_snapshot_is_loadable_yaml(self, tmp_path):
        cfg = RunConfig(output_dir=str(tmp_path))
        path = write_snapshot(cfg, tmp_path, "pretrain")
        snap = yaml.safe_load(path.read_text())
        assert snap["command"] == "pretrain"
        assert snap["train"]["variant"] == "prelax_std"
        assert snap == dict(resolved_config_dict(cfg), command="pretrain")


def cli_config(tmp_path, **extra):
    payload = {
        "output_dir": str(tmp_path / "run"),
        "dataset": {"n": 48, "size": 16, "seed": 3},
        "train": {
            "variant": "prelax_rot",
            "epochs": 1,
            "batch_size": 16,
            "base_lr": 0.05,
            "model": {
                "backbone": "mlp",
                "image_size": 16,
                "mlp_hidden": 16,
                "d_z": 8,
                "predictor_hidden": 4,
                "norm": "none",
            },
            "augment": {"out_size": 16, "crop_scale": [0.6, 1.0]},
        },
        "eval": {"k": 5, "queries": 2, "probe": {"epochs": 5, "lr": 1.0}},
    }
    payload.update(extra)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(payload))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = cli_config(tmp)
    code = main(["pretrain", "--config", str(config)])
    assert code == EXIT_OK
    return {"config": config, "run": tmp / "run", "checkpoint": tmp / "run" / "checkpoint_final.npz"}


class TestCliPretrain:
    def test_artifacts(self, trained_run):
        run = trained_run["run"]
        assert trained_run["checkpoint"].is_file()
        assert (run / "metrics.jsonl").is_file()
        snap = yaml.safe_load((run / "resolved_pretrain.yaml").read_text())
        assert snap["command"] == "pretrain"
        assert snap["train"]["epochs"] == 1

    def test_size_mismatch_exits_config(self, tmp_path, capsys):
        config = cli_config(tmp_path)
        code = main(["pretrain", "--config", str(config), "--set", "train.augment.out_size=32"])
        assert code == EXIT_CONFIG
        assert "out_size" in capsys.readouterr().err

    def test_dataset_size_mismatch_exits_config(self, tmp_path, capsys):
        config = cli_config(tmp_path)
        code = main(["pretrain", "--config", str(config), "--set", "dataset.size=32"])
        assert code == EXIT_CONFIG
        assert "image_size" in capsys.readouterr().err

    def test_unknown_key_exits_config(self, tmp_path, capsys):
        config = cli_config(tmp_path)
        code = main(["pretrain", "--config", str(config), "--set", "train.warmup=5"])
        assert code == EXIT_CONFIG
        assert "unknown config key" in capsys.readouterr().err


class TestCliEval:
    def test_linear_probe_reports_accuracy(self, trained_run, capsys):
        code = main([
            "eval",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(trained_run["checkpoint"]),
        ])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "accuracy=" in out
        assert (trained_run["run"] / "embeddings_train.pxet").is_file()
        assert (trained_run["run"] / "embeddings_test.pxet").is_file()

    def test_missing_checkpoint_exits_config(self, trained_run, capsys):
        code = main([
            "eval",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(trained_run["run"] / "nope.npz"),
        ])
        assert code == EXIT_CONFIG
        assert "checkpoint not found" in capsys.readouterr().err

    def test_d_z_mismatch_exits_config(self, trained_run, capsys):
        code = main([
            "eval",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(trained_run["checkpoint"]),
            "--set", "train.model.d_z=32",
        ])
        assert code == EXIT_CONFIG
        assert "d_z=8" in capsys.readouterr().err

    def test_corrupt_checkpoint_exits_runtime(self, trained_run, tmp_path, capsys):
        bad = tmp_path / "garbage.npz"
        bad.write_bytes(b"not a zip archive")
        code = main([
            "eval",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(bad),
        ])
        assert code == EXIT_RUNTIME
        assert "error:" in capsys.readouterr().err

    def test_retrieve_alias_writes_csv_and_grid(self, trained_run, capsys):
        code = main([
            "retrieve",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(trained_run["checkpoint"]),
        ])
        assert code == EXIT_OK
        run = trained_run["run"]
        assert (run / "resolved_retrieve.yaml").is_file()
        assert (run / "retrieval_grid.png").is_file()
        lines = (run / "retrieval.csv").read_text().strip().splitlines()
        assert lines[0] == "query_id,rank,neighbor_id,cosine"
        assert len(lines) == 1 + 2 * 5
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "1"
        assert first[2] != "0"

    def test_retrieve_needs_enough_images(self, trained_run, capsys):
        code = main([
            "retrieve",
            "--config", str(trained_run["config"]),
            "--checkpoint", str(trained_run["checkpoint"]),
            "--set", "dataset.n=4", "--set", "eval.k=5",
        ])
        assert code == EXIT_CONFIG
        assert "k=5" in capsys.readouterr().err


class TestCliCheckReport:
    def test_check_fast_passes(self, capsys):
        code = main(["check", "--fast"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "5/5 check suites passed" in out
        assert "FAIL" not in out

    def test_check_injected_fault_fails(self, capsys):
        code = main(["check", "--fast", "--inject-fault", "r2s_sign"])
        assert code == EXIT_RUNTIME
        out = capsys.readouterr().out
        assert "FAIL  r2s-representation-identity" in out

    def test_report_renders_csv_and_figures(self, trained_run, capsys):
        code = main(["report", "--run", str(trained_run["run"])])
        assert code == EXIT_OK
        run = trained_run["run"]
        for name in ("metrics.csv", "loss_terms.png", "schedules.png", "residual_norm.png"):
            assert (run / name).is_file()
        header = (run / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,step,lr,tau,sim,")

    def test_report_missing_metrics_exits_config(self, tmp_path, capsys):
        code = main(["report", "--run", str(tmp_path)])
        assert code == EXIT_CONFIG
        assert "metrics" in capsys.readouterr().err

    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
