"""Experiment harness: config, ledger, selection, training, k-fold,
evaluation."""

import dataclasses
import json
import warnings

import numpy as np
import pytest

import tcrlab.harness as harness
from tcrlab.errors import (ConfigError, DataError, InferenceError,
                           MetricError, NumericError, SelectionError)
from tcrlab.harness import (EXPLANATION_BASED, LOSS_BASED, ExperimentConfig,
                            LedgerRow, RunLedger, evaluate, load_model,
                            run_kfold, select_checkpoint, train)
from tcrlab.records import (BindingRecord, save_ground_truth_jsonl,
                            save_records_jsonl)
from tcrlab.synthetic import SynthConfig, generate_synthetic


def smoke_config(tmp_path, **overrides):
    doc = {
        "arch": {"builder": "egm2"},
        "block": {"layers": 1, "hidden": 16, "heads": 1, "ffn_mult": 2,
                  "dropout": 0.0},
        "data": {"train": str(tmp_path / "data.jsonl"),
                 "ground_truth": str(tmp_path / "truth.jsonl")},
        "seed": 5,
        "epochs": 2,
        "batch_size": 16,
        "lr": 1e-3,
        "selection": "loss",
        "selection_start_epoch": 0,
        "eval_every": 1,
        "out_dir": str(tmp_path / "run"),
    }
    doc.update(overrides)
    return ExperimentConfig.from_dict(doc)


def write_smoke_dataset(tmp_path, n=40, seed=3):
    records, truth, _ = generate_synthetic(SynthConfig(rule="joint", n=n),
                                           seed=seed)
    save_records_jsonl(records, tmp_path / "data.jsonl")
    save_ground_truth_jsonl(truth, tmp_path / "truth.jsonl")
    return records, truth


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """One tiny completed training run shared across read-only tests."""
    tmp_path = tmp_path_factory.mktemp("smoke")
    records, truth = write_smoke_dataset(tmp_path)
    config = smoke_config(tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ledger = train(config)
    return {"tmp": tmp_path, "config": config, "ledger": ledger,
            "records": records, "truth": truth}


class TestExperimentConfig:
    def test_round_trip(self, tmp_path):
        config = smoke_config(tmp_path)
        again = ExperimentConfig.from_dict(config.to_dict())
        assert again == config

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config keys"):
            smoke_config(tmp_path, learning_rate=0.1)

    def test_selection_window_inside_run(self, tmp_path):
        with pytest.raises(ConfigError, match="selection_start_epoch"):
            smoke_config(tmp_path, epochs=2, selection_start_epoch=2)

    def test_unknown_builder(self, tmp_path):
        with pytest.raises(ConfigError, match="builder"):
            smoke_config(tmp_path, arch={"builder": "egm9"})

    def test_strategy_aliases(self, tmp_path):
        assert smoke_config(tmp_path, selection="loss").selection == LOSS_BASED
        assert (smoke_config(tmp_path, selection="EXPLANATION_BASED")
                .selection == EXPLANATION_BASED)
        with pytest.raises(ConfigError, match="strategy"):
            smoke_config(tmp_path, selection="vibes")

    def test_data_train_required(self, tmp_path):
        with pytest.raises(ConfigError, match="data.train"):
            smoke_config(tmp_path, data={})

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            ExperimentConfig.from_json_file(path)

    def test_builder_options_forwarded(self, tmp_path):
        config = smoke_config(
            tmp_path, arch={"builder": "xprobe",
                            "options": {"direction": "A_TO_B"}})
        spec = config.build_spec()
        assert spec.modalities == ["EPITOPE", "CDR3B"]

    def test_inline_spec_accepted(self, tmp_path):
        base = smoke_config(tmp_path).build_spec()
        config = smoke_config(tmp_path, arch={"spec": base.to_dict()})
        assert config.build_spec().to_dict() == base.to_dict()

    def test_lr_drops_validated(self, tmp_path):
        smoke_config(tmp_path, lr_drops=[[0.75, 3e-4], [0.83, 1e-4]])
        with pytest.raises(ConfigError, match="lr_drops"):
            smoke_config(tmp_path, lr_drops=[[0.75]])
        with pytest.raises(ConfigError, match="lr_drops"):
            smoke_config(tmp_path, lr_drops=[[1.5, 1e-4]])
        with pytest.raises(ConfigError, match="lr_drops"):
            smoke_config(tmp_path, lr_drops=[[0.5, 0.0]])


class TestLrDrops:
    class FakeOpt:
        def __init__(self, lr):
            self.lr = lr

    DROPS = [[0.75, 3e-4], [0.83, 1e-4]]

    def test_highest_crossed_threshold_wins(self):
        opt = self.FakeOpt(1e-3)
        harness._apply_lr_drops(opt, 0.90, self.DROPS)
        assert opt.lr == 1e-4

    def test_single_threshold_crossing(self):
        opt = self.FakeOpt(1e-3)
        harness._apply_lr_drops(opt, 0.78, self.DROPS)
        assert opt.lr == 3e-4

    def test_never_raises_rate_after_dip(self):
        opt = self.FakeOpt(1e-4)
        harness._apply_lr_drops(opt, 0.78, self.DROPS)
        assert opt.lr == 1e-4

    def test_below_all_thresholds_is_noop(self):
        opt = self.FakeOpt(1e-3)
        harness._apply_lr_drops(opt, 0.60, self.DROPS)
        assert opt.lr == 1e-3

    def test_none_auc_is_noop(self):
        opt = self.FakeOpt(1e-3)
        harness._apply_lr_drops(opt, None, self.DROPS)
        assert opt.lr == 1e-3


def make_ledger(entries, start=300):
    """entries: (epoch, loss_total, quality or None, checkpoint or None)."""
    ledger = RunLedger({"config": {"selection_start_epoch": start}})
    for epoch, loss, quality, ckpt in entries:
        ledger.append(LedgerRow(epoch=epoch, loss_parts={"BINDER": loss},
                                loss_total=loss, val_auc=0.5,
                                explanation_quality=quality,
                                checkpoint=ckpt))
    return ledger


class TestSelection:
    def test_argmin_loss(self):
        ledger = make_ledger([(300, 3.0, None, "a"), (310, 1.0, None, "b"),
                              (320, 2.0, None, "c")])
        assert select_checkpoint(ledger, LOSS_BASED).checkpoint == "b"

    def test_quality_tie_keeps_earlier_epoch(self):
        ledger = make_ledger([(300, 1.0, 0.5, "a"), (310, 1.0, 0.7, "b"),
                              (320, 1.0, 0.7, "c")])
        assert select_checkpoint(ledger, EXPLANATION_BASED).epoch == 310

    def test_loss_tie_keeps_earlier_epoch(self):
        ledger = make_ledger([(300, 2.0, None, "a"), (310, 2.0, None, "b")])
        assert select_checkpoint(ledger, "loss").checkpoint == "a"

    def test_strategies_can_diverge(self):
        ledger = make_ledger([(300, 1.0, 0.2, "a"), (310, 3.0, 0.9, "b")])
        by_loss = select_checkpoint(ledger, "loss").checkpoint
        by_quality = select_checkpoint(ledger, "explanation").checkpoint
        assert (by_loss, by_quality) == ("a", "b")

    def test_rows_before_window_excluded(self):
        ledger = make_ledger([(100, 0.1, 0.9, "early"), (300, 5.0, 0.1, "in")])
        assert select_checkpoint(ledger, "loss").checkpoint == "in"
        assert select_checkpoint(ledger, "explanation").checkpoint == "in"

    def test_no_checkpoints_is_selection_error(self):
        ledger = make_ledger([(300, 1.0, None, None)])
        with pytest.raises(SelectionError):
            select_checkpoint(ledger, "loss")

    def test_quality_rows_required_for_explanation(self):
        ledger = make_ledger([(300, 1.0, None, "a")])
        with pytest.raises(SelectionError):
            select_checkpoint(ledger, "explanation")

    def test_unknown_strategy(self):
        ledger = make_ledger([(300, 1.0, None, "a")])
        with pytest.raises(ConfigError):
            select_checkpoint(ledger, "best")

    def test_selection_is_pure(self):
        ledger = make_ledger([(300, 2.0, 0.1, "a"), (310, 1.0, 0.9, "b")])
        first = select_checkpoint(ledger, "loss")
        assert select_checkpoint(ledger, "loss") is first


class TestRunLedger:
    def test_epochs_must_increase(self):
        ledger = make_ledger([(1, 1.0, None, None)])
        with pytest.raises(DataError, match="increase"):
            ledger.append(LedgerRow(epoch=1, loss_parts={}, loss_total=0.0))

    def test_save_load_round_trip(self, tmp_path):
        ledger = make_ledger([(300, 2.0, 0.4, "a"), (310, 1.0, None, None)])
        ledger.selected = {"LOSS_BASED": "a"}
        path = tmp_path / "ledger.jsonl"
        ledger.save(path)
        again = RunLedger.load(path)
        assert again.meta == ledger.meta
        assert again.selected == ledger.selected
        assert [dataclasses.asdict(r) for r in again.rows] == \
               [dataclasses.asdict(r) for r in ledger.rows]

    def test_selected_must_reference_real_checkpoint(self, tmp_path):
        ledger = make_ledger([(300, 2.0, None, "a")])
        ledger.selected = {"LOSS_BASED": "ghost"}
        path = tmp_path / "ledger.jsonl"
        ledger.save(path)
        with pytest.raises(DataError, match="ghost"):
            RunLedger.load(path)

    def test_row_before_meta_rejected(self, tmp_path):
        path = tmp_path / "ledger.jsonl"
        row = json.dumps({"kind": "row", "epoch": 1, "loss_parts": {},
                          "loss_total": 1.0, "val_auc": None,
                          "explanation_quality": None, "checkpoint": None})
        path.write_text(row + "\n")
        with pytest.raises(DataError, match="meta"):
            RunLedger.load(path)


class TestTrain:
    def test_smoke_run_shape(self, smoke_run):
        ledger = smoke_run["ledger"]
        config = smoke_run["config"]
        assert [r.epoch for r in ledger.rows] == [1, 2]
        out_dir = smoke_run["tmp"] / "run"
        assert (out_dir / "ledger.jsonl").exists()
        for row in ledger.rows:
            assert set(row.loss_parts) == {"BINDER", "MLM_ENC"}
            assert np.isfinite(row.loss_total)
            assert 0.0 <= row.val_auc <= 1.0
            assert row.explanation_quality is not None
            assert (out_dir / row.checkpoint).exists()
        assert set(ledger.selected) == {LOSS_BASED, EXPLANATION_BASED}
        assert ledger.meta["n_train"] == 32 and ledger.meta["n_val"] == 8

    def test_saved_ledger_matches_returned(self, smoke_run):
        loaded = RunLedger.load(smoke_run["tmp"] / "run" / "ledger.jsonl")
        assert loaded.selected == smoke_run["ledger"].selected
        for a, b in zip(loaded.rows, smoke_run["ledger"].rows):
            assert dataclasses.asdict(a) == dataclasses.asdict(b)

    def test_bitwise_deterministic_ledger(self, tmp_path):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            train(config)
            first = (tmp_path / "run" / "ledger.jsonl").read_bytes()
            train(config)
            second = (tmp_path / "run" / "ledger.jsonl").read_bytes()
        assert first == second

    def test_explanation_selection_requires_truth(self, tmp_path):
        write_smoke_dataset(tmp_path)
        config = smoke_config(
            tmp_path, selection="explanation",
            data={"train": str(tmp_path / "data.jsonl")})
        with pytest.raises(ConfigError, match="ground"):
            train(config)

    def test_checkpoints_only_inside_selection_window(self, tmp_path):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path, epochs=3, selection_start_epoch=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ledger = train(config)
        assert [r.checkpoint is not None for r in ledger.rows] == \
               [False, True, True]

    def test_final_epoch_always_checkpointed(self, tmp_path):
        write_smoke_dataset(tmp_path)
        # epochs=3 never hits eval_every=10, except for the forced final
        config = smoke_config(tmp_path, epochs=3, eval_every=10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ledger = train(config)
        assert [r.checkpoint is not None for r in ledger.rows] == \
               [False, False, True]

    def test_early_stop_on_threshold(self, tmp_path):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path, epochs=50, stop_val_auc=0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ledger = train(config)
        assert len(ledger.rows) == 1
        assert ledger.rows[0].checkpoint is not None

    def test_non_finite_loss_aborts_with_diagnostics(self, tmp_path,
                                                     monkeypatch):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path)
        real = harness.total_loss
        calls = {"n": 0}

        def poisoned(parts, cfg):
            total, log = real(parts, cfg)
            calls["n"] += 1
            if calls["n"] == 2:
                log["BINDER"] = float("nan")
            return total, log

        monkeypatch.setattr(harness, "total_loss", poisoned)
        with pytest.raises(NumericError, match="non-finite"):
            train(config)
        doc = json.loads((tmp_path / "run" / "diagnostic.json").read_text())
        assert doc["epoch"] == 1
        assert len(doc["record_ids"]) == 16
        assert doc["loss_parts"]["BINDER"] == "nan"

    def test_explicit_records_need_val(self, tmp_path):
        records, _ = write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path)
        with pytest.raises(ConfigError, match="val_records"):
            train(config, records=records)


@pytest.fixture(scope="module")
def kfold_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("kfold")
    write_smoke_dataset(tmp_path)
    config = smoke_config(tmp_path, folds=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = run_kfold(config)
    return {"tmp": tmp_path, "config": config, "report": report}


class TestKfold:
    def test_report_shape(self, kfold_run):
        report = kfold_run["report"]
        assert len(report["folds"]) == 2
        assert report["k"] == 2
        for i, fold in enumerate(report["folds"]):
            assert fold["fold"] == i
            assert fold["n_train"] + fold["n_val"] == 40
            assert (kfold_run["tmp"] / "run" / fold["checkpoint"]).exists()

    def test_aggregate_matches_fold_values(self, kfold_run):
        report = kfold_run["report"]
        aucs = [f["val_auc"] for f in report["folds"]]
        assert report["mean_auc"] == pytest.approx(np.mean(aucs), abs=1e-12)
        assert report["std_auc"] == pytest.approx(np.std(aucs, ddof=1),
                                                  abs=1e-12)
        assert report["formatted"] == (f"{report['mean_auc']:.3f}"
                                       f"±{report['std_auc']:.3f}")

    def test_report_persisted(self, kfold_run):
        path = kfold_run["tmp"] / "run" / "kfold_report.json"
        on_disk = json.loads(path.read_text())
        assert on_disk == kfold_run["report"]

    def test_fold_ledgers_written(self, kfold_run):
        for i in range(2):
            path = kfold_run["tmp"] / "run" / f"fold-{i}" / "ledger.jsonl"
            ledger = RunLedger.load(path)
            assert ledger.meta["config"]["seed"] == \
                   kfold_run["config"].seed + i

    def test_seeded_rerun_identical(self, kfold_run, tmp_path):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path, folds=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            again = run_kfold(config)
        assert again == kfold_run["report"]

    def test_fold_failure_persists_partial_report(self, tmp_path,
                                                  monkeypatch):
        write_smoke_dataset(tmp_path)
        config = smoke_config(tmp_path, folds=2)
        real = harness.train
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NumericError("boom")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return real(*args, **kwargs)

        monkeypatch.setattr(harness, "train", flaky)
        with pytest.raises(NumericError, match="boom"):
            run_kfold(config)
        report = json.loads(
            (tmp_path / "run" / "kfold_report.json").read_text())
        assert len(report["folds"]) == 1
        assert "boom" in report["error"]
        assert "mean_auc" not in report


class TestEvaluate:
    def test_replay_matches_ledger(self, smoke_run):
        ledger = smoke_run["ledger"]
        config = smoke_run["config"]
        row = ledger.rows[-1]
        # rebuild the validation split exactly as train() did
        records = smoke_run["records"]
        rng = np.random.default_rng(config.seed + 1)
        perm = rng.permutation(len(records))
        n_val = max(1, int(round(len(records) * 0.2)))
        val = [records[i] for i in perm[:n_val]]
        report = evaluate(smoke_run["tmp"] / "run" / row.checkpoint, val)
        assert report.auc == pytest.approx(row.val_auc, abs=1e-6)

    def test_per_epitope_partition(self, smoke_run):
        records = smoke_run["records"]
        row = smoke_run["ledger"].rows[-1]
        report = evaluate(smoke_run["tmp"] / "run" / row.checkpoint, records)
        assert sum(e["n"] for e in report.per_epitope.values()) == \
               report.n_records == len(records)
        assert set(report.per_epitope) == {r.epitope for r in records}
        assert report.brhr is None

    def test_ground_truth_adds_brhr_table(self, smoke_run):
        row = smoke_run["ledger"].rows[-1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = evaluate(smoke_run["tmp"] / "run" / row.checkpoint,
                              smoke_run["records"], truth=smoke_run["truth"],
                              t_dec=-1.0)
        assert report.brhr is not None
        for stat in report.brhr.values():
            assert stat.n_records == len(smoke_run["records"])
        doc = report.to_dict()
        assert len(doc["brhr"]) == len(report.brhr)

    def test_single_class_dataset_raises(self, smoke_run):
        row = smoke_run["ledger"].rows[-1]
        binders = [r for r in smoke_run["records"] if r.is_binder]
        with pytest.raises(MetricError):
            evaluate(smoke_run["tmp"] / "run" / row.checkpoint, binders)

    def test_missing_modality_raises(self, smoke_run):
        row = smoke_run["ledger"].rows[-1]
        stripped = [
            BindingRecord(record_id=f"s{i}", epitope=r.epitope, label=r.label)
            for i, r in enumerate(smoke_run["records"])
        ]
        with pytest.raises(InferenceError, match="TCR_A"):
            evaluate(smoke_run["tmp"] / "run" / row.checkpoint, stripped)

    def test_empty_dataset_raises(self, smoke_run):
        row = smoke_run["ledger"].rows[-1]
        with pytest.raises(DataError):
            evaluate(smoke_run["tmp"] / "run" / row.checkpoint, [])

    def test_loaded_model_forward_is_bitwise_stable(self, smoke_run):
        row = smoke_run["ledger"].rows[-1]
        path = smoke_run["tmp"] / "run" / row.checkpoint
        model_a, _ = load_model(path)
        model_b, _ = load_model(path)
        from tcrlab.zoo import tokenize_records
        batch = tokenize_records(smoke_run["records"][:8],
                                 model_a.spec.modalities, model_a.max_lens)
        np.testing.assert_array_equal(model_a.forward(batch).p_bind,
                                      model_b.forward(batch).p_bind)
