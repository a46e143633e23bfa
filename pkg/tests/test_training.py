"""Training loop behavior: schedule, determinism, logging, and evaluation."""

import json

import numpy as np
import pytest
import torch

from humancrop.checkpoint import load_checkpoint
from humancrop.data import SynthSpec, synth_generate
from humancrop.errors import (ConfigError, TrainingDivergedError,
                              ValidationError)
from humancrop.geometry import CandidateParams
from humancrop.network import ModelConfig, build_model
from humancrop.training import (Trainer, TrainSchedule, evaluate_baseline,
                                evaluate_gaicd, evaluate_iou_disp,
                                learning_rate)

SMALL_MODEL = dict(channels=8, region_dim=16, content_dim=16, roi_size=4,
                   short_side=64)


def small_index(seed=0, count=3, crops=8):
    from humancrop.geometry import Size
    spec = SynthSpec(seed=seed, count=count, image_size=Size(96, 96),
                     crops_per_image=crops)
    return synth_generate(spec)


def small_schedule(**overrides):
    base = dict(epochs=2, base_lr=1e-3, warmup_epochs=1, crops_per_image=8,
                seed=0)
    base.update(overrides)
    return TrainSchedule(**base)


class TestLearningRate:
    def test_warmup_endpoints(self):
        sched = TrainSchedule(epochs=20, base_lr=1e-4, warmup_epochs=5)
        assert learning_rate(sched, 0.0) == 0.0
        assert learning_rate(sched, 5.0) == pytest.approx(1e-4)
        assert learning_rate(sched, 2.5) == pytest.approx(5e-5)

    def test_cosine_tail(self):
        sched = TrainSchedule(epochs=20, base_lr=1e-4, warmup_epochs=5)
        # midpoint of the decay window: cos(pi/2) -> half the base rate
        assert learning_rate(sched, 12.5) == pytest.approx(5e-5)
        assert learning_rate(sched, 20.0) == pytest.approx(0.0, abs=1e-20)

    def test_no_warmup(self):
        sched = TrainSchedule(epochs=10, base_lr=2e-3, warmup_epochs=0)
        assert learning_rate(sched, 0.0) == pytest.approx(2e-3)

    def test_monotone_decreasing_after_warmup(self):
        sched = TrainSchedule(epochs=30, base_lr=1e-4, warmup_epochs=3)
        values = [learning_rate(sched, p) for p in np.linspace(3, 30, 100)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v >= 0 for v in values)

    def test_out_of_range(self):
        sched = TrainSchedule(epochs=10)
        with pytest.raises(ValidationError):
            learning_rate(sched, -0.1)
        with pytest.raises(ValidationError):
            learning_rate(sched, 10.5)

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            TrainSchedule(epochs=5, warmup_epochs=5).validate()
        with pytest.raises(ConfigError):
            TrainSchedule(epochs=0).validate()
        with pytest.raises(ConfigError):
            TrainSchedule(crops_per_image=1).validate()
        with pytest.raises(ConfigError):
            TrainSchedule(base_lr=-1e-4).validate()

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            TrainSchedule.from_dict({"epochs": 5, "momentum": 0.9})


class TestTrainerRuns:
    def test_two_identical_seed_runs_log_identically(self, tmp_path):
        index = small_index()
        logs = []
        for run in ("a", "b"):
            model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
            log_path = tmp_path / f"{run}.jsonl"
            trainer = Trainer(model, index, small_schedule(), log_path=log_path)
            trainer.run()
            logs.append(log_path.read_bytes())
        assert logs[0] == logs[1]

    def test_log_schema(self, tmp_path):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        log_path = tmp_path / "train.jsonl"
        trainer = Trainer(model, index, small_schedule(), log_path=log_path)
        result = trainer.run()
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert len(lines) == result.epochs_run * len(index.images)
        for rec in lines:
            assert set(rec) == {"epoch", "step", "reg", "rank", "cont", "total"}
        assert [r["epoch"] for r in lines] == sorted(r["epoch"] for r in lines)

    def test_checkpoint_written_each_epoch_and_resumable(self, tmp_path):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        ck = tmp_path / "ck.zip"
        trainer = Trainer(model, index, small_schedule(epochs=3),
                          checkpoint_path=ck)
        trainer.run()
        loaded = load_checkpoint(ck)
        assert loaded.meta["epoch"] == 2
        assert loaded.optimizer_state is not None
        # resume: the next logged epoch is e + 1
        log_path = tmp_path / "resume.jsonl"
        resumed = Trainer(loaded.model, index,
                          TrainSchedule.from_dict(loaded.meta["schedule"]),
                          log_path=log_path, checkpoint_path=ck)
        resumed.optimizer.load_state_dict(loaded.optimizer_state)
        result = resumed.run(start_epoch=loaded.meta["epoch"] + 1)
        assert result.epochs_run == 0  # schedule already exhausted
        sched = TrainSchedule.from_dict({**loaded.meta["schedule"], "epochs": 4})
        resumed = Trainer(loaded.model, index, sched, log_path=log_path)
        result = resumed.run(start_epoch=loaded.meta["epoch"] + 1)
        first = json.loads(log_path.read_text().splitlines()[0])
        assert first["epoch"] == 3

    def test_early_stop_callback(self, tmp_path):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        trainer = Trainer(model, index, small_schedule(epochs=10))
        seen = []
        result = trainer.run(epoch_callback=lambda s: seen.append(s.epoch) or s.epoch >= 1)
        assert result.epochs_run == 2
        assert seen == [0, 1]

    def test_content_weight_zero_logs_zero_cont(self, tmp_path):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        log_path = tmp_path / "train.jsonl"
        trainer = Trainer(model, index, small_schedule(content_weight=0.0),
                          log_path=log_path)
        trainer.run()
        for line in log_path.read_text().splitlines():
            assert json.loads(line)["cont"] == 0.0

    def test_divergence_dump(self, tmp_path):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        log_path = tmp_path / "train.jsonl"
        trainer = Trainer(model, index, small_schedule(), log_path=log_path)
        with torch.no_grad():  # poison one weight so the first loss is NaN
            model.score_head.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            trainer.run()
        dump = json.loads(log_path.with_suffix(".diverged.json").read_text())
        assert dump["epoch"] == 0
        assert dump["image"].startswith("synth-")

    def test_empty_split_rejected(self):
        from humancrop.data import DatasetIndex
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        with pytest.raises(ValidationError):
            Trainer(model, DatasetIndex(split="t", images=[], mean_score=None),
                    small_schedule())

    def test_training_srcc_finite(self):
        index = small_index()
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        trainer = Trainer(model, index, small_schedule())
        value = trainer.training_srcc()
        assert -1.0 <= value <= 1.0


class TestEvaluationDrivers:
    def _trained(self, index):
        model = build_model(ModelConfig(**SMALL_MODEL), seed=0)
        Trainer(model, index, small_schedule(epochs=1, warmup_epochs=0)).run()
        return model

    def test_gaicd_driver(self):
        index = small_index()
        model = self._trained(index)
        report = evaluate_gaicd(model, index)
        assert report.protocol == "gaicd"
        assert report.configuration == "full"
        assert len(report.records) == len(index.images)
        assert -1.0 <= report.srcc_mean <= 1.0

    def test_iou_disp_driver(self):
        index = small_index()
        model = self._trained(index)
        params = CandidateParams(scales=(0.6, 0.8), stride_fraction=0.5)
        report = evaluate_iou_disp(model, index, params)
        assert report.protocol == "iou-disp"
        assert 0.0 <= report.iou_mean <= 1.0
        assert report.disp_mean >= 0.0

    def test_baselines(self):
        index = small_index()
        ra = evaluate_baseline(index, "a")
        rb = evaluate_baseline(index, "b")
        assert ra.configuration == "baseline_a"
        assert rb.configuration == "baseline_b"
        assert 0.0 <= ra.iou_mean <= 1.0
        assert 0.0 <= rb.iou_mean <= 1.0

    def test_baseline_requires_human_boxes(self):
        index = small_index()
        for img in index.images:
            img.human_box = None
        with pytest.raises(ValidationError):
            evaluate_baseline(index, "a")

    def test_unknown_baseline(self):
        index = small_index()
        with pytest.raises(ValidationError):
            evaluate_baseline(index, "c")
