import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from nsdnet import cli, harness
from nsdnet.harness import (
    ConfigError,
    DivergenceError,
    ExperimentConfig,
    MetricsRecord,
    best_epoch,
    build_network,
    churn_series,
    config_from_dict,
    config_from_file,
    emit_confusion_matrix,
    emit_mask_trace,
    metrics_csv_lines,
    run_retrain_schedule,
    run_training,
    sweep_p,
    sweep_size,
)
from nsdnet.nn import DenseLayer, Network
from nsdnet.nsdropout import ns_layers


def tiny_config(**over):
    base = dict(
        dataset="synthetic",
        dataset_options={"train_n": 400, "test_n": 120, "dim": 16,
                         "class_count": 3, "noise": 0.4},
        arch=(16, 10, 3),
        regularizer="none",
        budget=300,
        epochs=6,
        seed=11,
    )
    base.update(over)
    return config_from_dict(base)


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"regularizer": "none", "nope": 1})

    def test_bad_regularizer(self):
        with pytest.raises(ConfigError):
            tiny_config(regularizer="superdrop")

    def test_p_out_of_range(self):
        with pytest.raises(ConfigError):
            tiny_config(p=(1.5,))

    def test_too_many_p_values(self):
        with pytest.raises(ConfigError):
            tiny_config(p=(0.1, 0.1, 0.1, 0.1))

    def test_default_schedule(self):
        cfg = tiny_config(regularizer="nsdropout")
        assert cfg.p_schedule() == (0.5, 0.2)
        fashion = tiny_config(regularizer="nsdropout", dataset="fashion-mnist")
        assert fashion.p_schedule() == (0.2, 0.2)
        assert tiny_config().p_schedule() == (0.0, 0.0)

    def test_short_p_list_padded(self):
        cfg = tiny_config(regularizer="nsdropout", p=(0.3,))
        assert cfg.p_schedule() == (0.3, 0.0)

    def test_config_file_round_trip(self, tmp_path):
        cfg = tiny_config(regularizer="dropout", p=(0.4, 0.1))
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        loaded = config_from_file(path)
        assert loaded == cfg

    def test_nsdropout_lr_multiplier(self):
        cfg = tiny_config(regularizer="nsdropout", learning_rate=0.01,
                          lr_multiplier=10.0)
        assert cfg.sgd_config().learning_rate == pytest.approx(0.1)
        base = tiny_config(learning_rate=0.01, lr_multiplier=10.0)
        assert base.sgd_config().learning_rate == 0.01


class TestBuildNetwork:
    def test_zero_schedule_is_plain_stack(self):
        net = build_network(tiny_config(), 16, 3)
        kinds = [type(l).__name__ for l in net.layers]
        assert kinds == ["DenseLayer", "ReluLayer", "DenseLayer"]

    def test_ns_layers_at_active_slots(self):
        cfg = tiny_config(regularizer="nsdropout", p=(0.5, 0.2))
        net = build_network(cfg, 16, 3)
        kinds = [type(l).__name__ for l in net.layers]
        assert kinds == ["NsDropoutLayer", "DenseLayer", "ReluLayer",
                         "NsDropoutLayer", "DenseLayer"]

    def test_init_identical_across_regularizers(self):
        nets = [build_network(tiny_config(regularizer=reg), 16, 3)
                for reg in ("none", "dropout", "nsdropout")]
        first = nets[0].dense_layers()
        for net in nets[1:]:
            for a, b in zip(first, net.dense_layers()):
                assert a.W.tobytes() == b.W.tobytes()

    def test_drop_all_units_guard(self):
        with pytest.raises(ConfigError, match="all"):
            build_network(tiny_config(regularizer="nsdropout",
                                      p=(0.999, 0.0)), 16, 3)

    def test_arch_must_match_data(self):
        with pytest.raises(ConfigError):
            build_network(tiny_config(), 17, 3)
        with pytest.raises(ConfigError):
            build_network(tiny_config(), 16, 4)


class TestRunTraining:
    def test_toy_run_reaches_full_train_accuracy(self):
        cfg = config_from_dict(dict(
            dataset="toy", arch=(2, 8, 2), budget=160, epochs=50, seed=5,
            dataset_options={"train_n": 200, "test_n": 50}))
        result = run_training(cfg)
        assert max(r.train_acc for r in result.records) == 1.0
        assert result.records[-1].test_acc["labeled"] > 0.9

    def test_metrics_schema_and_record_stream(self):
        cfg = tiny_config(regularizer="nsdropout")
        result = run_training(cfg)
        assert [r.epoch for r in result.records] == list(range(1, 7))
        text = metrics_csv_lines(result.records, cfg.eval_modes)
        header = text.splitlines()[0].split(",")
        assert header == ["epoch", "train_loss", "train_acc",
                          "unseen_val_acc", "test_acc_labeled",
                          "test_acc_predicted", "mask_churn_mean"]
        for r in result.records:
            assert 0.0 <= r.train_acc <= 1.0
            assert 0.0 <= r.unseen_val_acc <= 1.0
            assert r.wall_time >= 0.0
        # first epoch has no churn (one mask set only), later epochs do
        assert result.records[0].mask_churn is None
        assert all(r.mask_churn is not None for r in result.records[1:])

    def test_p_zero_metrics_byte_identical_to_baseline(self, tmp_path):
        base = tiny_config(output_dir=str(tmp_path / "base"))
        ns = tiny_config(regularizer="nsdropout", p=(0.0, 0.0),
                         output_dir=str(tmp_path / "ns"))
        run_training(base)
        run_training(ns)
        base_csv = (tmp_path / "base" / "metrics.csv").read_bytes()
        ns_csv = (tmp_path / "ns" / "metrics.csv").read_bytes()
        assert base_csv == ns_csv

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_config(regularizer="nsdropout")
        for name in ("a", "b"):
            run_training(replace(cfg, output_dir=str(tmp_path / name)))
        for fname in ("metrics.csv", "metadata.json", "checkpoint.nsdw",
                      "masks_final.csv", "mask_trace.csv",
                      "confusion_labeled.csv", "confusion_predicted.csv"):
            a = (tmp_path / "a" / fname).read_bytes()
            b = (tmp_path / "b" / fname).read_bytes()
            assert a == b, fname

    def test_split_and_init_identical_across_regularizers(self):
        metas = [run_training(tiny_config(regularizer=reg)).metadata
                 for reg in ("none", "dropout", "nsdropout")]
        for meta in metas[1:]:
            assert meta["split"] == metas[0]["split"]
            assert meta["init_sha256"] == metas[0]["init_sha256"]

    def test_run_files_written(self, tmp_path):
        cfg = tiny_config(regularizer="nsdropout",
                          output_dir=str(tmp_path / "run"))
        result = run_training(cfg)
        out = Path(result.out_dir)
        for fname in ("metrics.csv", "metadata.json", "timing.txt",
                      "checkpoint.nsdw", "masks_final.csv", "mask_trace.csv",
                      "confusion_labeled.csv", "confusion_predicted.csv"):
            assert (out / fname).exists(), fname
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["config"]["regularizer"] == "nsdropout"
        assert meta["split"]["train_n"] == 240

    def test_divergence_detected(self):
        cfg = tiny_config(learning_rate=1e12, epochs=10)
        with pytest.raises(DivergenceError):
            run_training(cfg)

    def test_divergence_writes_diagnostic(self, tmp_path):
        cfg = tiny_config(learning_rate=1e12, epochs=10,
                          output_dir=str(tmp_path / "div"))
        with pytest.raises(DivergenceError):
            run_training(cfg)
        meta = json.loads((tmp_path / "div" / "metadata.json").read_text())
        assert "divergence" in meta

    def test_mini_batch_regime(self):
        cfg = tiny_config(regularizer="nsdropout", batch_size=64,
                          refresh="per-batch", epochs=3)
        result = run_training(cfg)
        assert len(result.records) == 3
        # one refresh per batch: 240 train rows / 64 -> 4 batches/epoch
        refresh_epochs = [e for e, _, _, _ in result.trace]
        assert refresh_epochs.count(1) == 4 * 2 * 3  # batches * layers * C

    def test_per_batch_refresh_with_full_batch_equals_per_epoch(self):
        per_batch = run_training(tiny_config(regularizer="nsdropout",
                                             refresh="per-batch", epochs=4))
        per_epoch = run_training(tiny_config(regularizer="nsdropout",
                                             refresh="per-epoch", epochs=4))
        assert per_batch.trace == per_epoch.trace
        assert (metrics_csv_lines(per_batch.records, per_batch.config.eval_modes)
                == metrics_csv_lines(per_epoch.records,
                                     per_epoch.config.eval_modes))


class TestRetrain:
    def test_best_epoch_earliest_max(self):
        def rec(epoch, acc):
            return MetricsRecord(epoch, 0.1, 0.9, acc, {}, None, 0.0)
        assert best_epoch([rec(1, 0.5), rec(2, 0.9), rec(3, 0.7)]) == 2
        assert best_epoch([rec(1, 0.5), rec(2, 0.9), rec(3, 0.9)]) == 2
        assert best_epoch([rec(1, 0.5), rec(2, 0.6), rec(3, 0.9)]) == 3

    def test_phase2_prefix_matches_phase1(self):
        cfg = tiny_config(regularizer="nsdropout", epochs=6)
        phase1, phase2, e_star = run_retrain_schedule(cfg)
        assert 1 <= e_star <= 6
        assert len(phase2.records) == e_star
        want = metrics_csv_lines(phase1.records[:e_star], cfg.eval_modes)
        got = metrics_csv_lines(phase2.records, cfg.eval_modes)
        assert got == want


class TestSweeps:
    def test_sweep_p_rows_and_baseline_at_zero(self):
        cfg = tiny_config(epochs=3)
        rows = sweep_p(cfg, [0.0, 0.2])
        assert len(rows) == 4  # two regularizers x two p values
        assert {r["regularizer"] for r in rows} == {"dropout", "nsdropout"}
        baseline = run_training(tiny_config(epochs=3))
        base_errs = harness.final_errors(baseline)
        for row in rows:
            if row["p"] == 0.0:
                assert row["test_err_labeled"] == \
                    base_errs["test_err_labeled"]
                assert row["train_err"] == base_errs["train_err"]

    def test_sweep_p_drop_all_guard(self):
        cfg = tiny_config(epochs=2)
        with pytest.raises(ConfigError):
            sweep_p(cfg, [0.999])

    def test_sweep_p_writes_table(self, tmp_path):
        cfg = tiny_config(epochs=2)
        rows = sweep_p(cfg, [0.0, 0.3], tmp_path)
        text = (tmp_path / "sweep_p.csv").read_text().splitlines()
        assert text[0] == ("regularizer,p,train_err,test_err_labeled,"
                           "test_err_predicted")
        assert len(text) == len(rows) + 1

    def test_sweep_size_schema(self, tmp_path):
        cfg = tiny_config(epochs=2)
        rows = sweep_size(cfg, [30, 60], tmp_path)
        assert [r["n"] for r in rows] == [30, 60]
        for row in rows:
            assert "dropout_test_err" in row
            assert "nsdropout_test_err_labeled" in row
            assert "nsdropout_test_err_predicted" in row
        header = (tmp_path / "sweep_size.csv").read_text().splitlines()[0]
        assert header.startswith("n,dropout_test_err,nsdropout_test_err")

    def test_sweep_at_full_size_equals_plain_run(self):
        cfg = tiny_config(epochs=3)
        rows = sweep_size(cfg, [400])  # the whole synthetic source
        plain = run_training(replace(cfg, regularizer="dropout", budget=400))
        errs = harness.final_errors(plain)
        assert rows[0]["dropout_test_err"] == errs["test_err_labeled"]


class TestConfusion:
    def test_perfect_predictor_is_diagonal(self):
        # one-hot images through an identity dense layer
        images = np.eye(3)[np.array([0, 1, 2, 1, 0])]
        from nsdnet.datasets import Dataset
        test = Dataset(images, np.array([0, 1, 2, 1, 0]), 3, "t")
        layer = DenseLayer(3, 3)
        layer.W = np.eye(3)
        counts = emit_confusion_matrix(Network([layer]), test, "off")
        assert np.array_equal(counts, np.diag([2, 2, 1]))

    def test_constant_predictor_single_column(self):
        images = np.zeros((5, 3))
        from nsdnet.datasets import Dataset
        test = Dataset(images, np.array([0, 1, 2, 1, 0]), 3, "t")
        layer = DenseLayer(3, 3)
        layer.b = np.array([0.0, 0.0, 1.0])
        counts = emit_confusion_matrix(Network([layer]), test, "off")
        assert counts[:, 2].sum() == 5
        assert counts[:, :2].sum() == 0

    def test_accuracy_matches_harness_accuracy(self):
        cfg = tiny_config(regularizer="nsdropout", epochs=4)
        result = run_training(cfg)
        _, test = harness.load_dataset(cfg)
        counts = emit_confusion_matrix(result.network, test, "labeled")
        acc_from_matrix = counts.trace() / counts.sum()
        assert abs(acc_from_matrix
                   - result.records[-1].test_acc["labeled"]) < 1e-12
        assert counts.sum() == test.n
        row_sums = counts.sum(axis=1)
        assert np.array_equal(row_sums, np.bincount(test.labels, minlength=3))


class TestMaskTrace:
    def test_refresh_never_series_all_zeros(self):
        cfg = tiny_config(regularizer="nsdropout", refresh="never", epochs=5)
        result = run_training(cfg)
        series = emit_mask_trace(result)
        assert len(series) == 4  # epochs - 1
        assert all(v == 0.0 for _, v in series)

    def test_series_length_and_replay_matches_metrics(self, tmp_path):
        cfg = tiny_config(regularizer="nsdropout", epochs=6)
        result = run_training(cfg)
        series = emit_mask_trace(result, tmp_path)
        assert len(series) == 5
        for (epoch, value), record in zip(series, result.records[1:]):
            assert epoch == record.epoch
            assert value == pytest.approx(record.mask_churn, abs=1e-12)
        text = (tmp_path / "mask_churn_series.csv").read_text().splitlines()
        assert text[0] == "epoch,mean_changed"
        assert len(text) == 6

    def test_replay_from_written_trace_file(self, tmp_path):
        cfg = tiny_config(regularizer="nsdropout", epochs=4,
                          output_dir=str(tmp_path / "run"))
        result = run_training(cfg)
        lines = (tmp_path / "run" / "mask_trace.csv").read_text().splitlines()
        trace = []
        for line in lines[1:]:
            e, l, c, h = line.split(",")
            trace.append((int(e), int(l), int(c), h))
        assert churn_series(trace, 4) == churn_series(result.trace, 4)


class TestRestoreRun:
    def test_restored_network_reproduces_accuracy(self, tmp_path):
        cfg = tiny_config(regularizer="nsdropout", epochs=4,
                          output_dir=str(tmp_path / "run"))
        result = run_training(cfg)
        config, net = harness.restore_run(tmp_path / "run")
        _, test = harness.load_dataset(config)
        counts = emit_confusion_matrix(net, test, "labeled")
        acc = counts.trace() / counts.sum()
        assert acc == pytest.approx(result.records[-1].test_acc["labeled"],
                                    abs=1e-12)


class TestCli:
    def test_train_toy(self, tmp_path, capsys):
        code = cli.main([
            "-q", "train", "--dataset", "toy", "--arch", "2-8-2",
            "--budget", "160", "--epochs", "5", "--seed", "3",
            "--dataset-opt", "train_n=200", "--dataset-opt", "test_n=50",
            "--out", str(tmp_path / "run")])
        assert code == 0
        assert (tmp_path / "run" / "metrics.csv").exists()
        out = capsys.readouterr().out
        assert "final epoch 5" in out

    def test_bad_config_exit_code_1(self):
        assert cli.main(["-q", "train", "--regularizer", "bogus"]) == 1
        assert cli.main(["-q", "train", "--arch", "not-an-arch"]) == 1
        assert cli.main(["-q", "bogus-subcommand"]) == 1

    def test_divergence_exit_code_2(self):
        code = cli.main([
            "-q", "train", "--dataset", "toy", "--arch", "2-8-2",
            "--budget", "160", "--epochs", "10", "--lr", "1e12",
            "--dataset-opt", "train_n=200", "--dataset-opt", "test_n=50"])
        assert code == 2

    def test_gradcheck_all_regularizers(self, capsys):
        code = cli.main(["-q", "gradcheck", "--arch", "10-8-3",
                         "--batch", "6", "--seed", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "nsdropout" in out and "worst" in out

    def test_eval_subcommand(self, tmp_path, capsys):
        assert cli.main([
            "-q", "train", "--dataset", "toy", "--arch", "2-8-2",
            "--regularizer", "nsdropout", "--p", "0.5",
            "--budget", "160", "--epochs", "4", "--seed", "3",
            "--dataset-opt", "train_n=200", "--dataset-opt", "test_n=50",
            "--out", str(tmp_path / "run")]) == 0
        code = cli.main(["-q", "eval", "--run-dir", str(tmp_path / "run")])
        assert code == 0
        out = capsys.readouterr().out
        assert "test_acc_labeled=" in out

    def test_config_file_with_override(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(tiny_config(epochs=2).to_dict()))
        code = cli.main(["-q", "train", "--config", str(path),
                         "--epochs", "3", "--out", str(tmp_path / "run")])
        assert code == 0
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 4  # header + 3 epochs
