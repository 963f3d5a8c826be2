"""Tests for the optimizer, checkpoints and the training loop."""
import csv
import math
import os

import numpy as np
import pytest

from app.config import PROJECT_ROOT, load_experiment_config
from app.database import SessionLocal, TrainingRun
from app.errors import CheckpointError, ConfigError, ContractError, ManifestError, TrainingDivergenceError
from app.models import ExperimentConfig, FrontendConfig, ManifestEntry, ModelConfig, RunStatus, SynthSpec, TrainConfig
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.evaluation import evaluate, load_for_inference, read_manifest, write_manifest
from app.services.optim import OptimizerState, adamw_step, clip_grad_norm, global_norm, lr_schedule
from app.services.samba import SambaASR
from app.services.synth import synth_corpus
from app.services.tokenizer import save_vocab, train_bpe
from app.services.trainer import (
    METRICS_HEADER,
    cancel_run,
    collate_batch,
    create_training_run,
    epoch_batches,
    load_dataset,
    mark_interrupted_runs,
    train_loop,
    train_step,
)
from tests.conftest import CORPUS_FRONTEND, corpus_experiment, random_mel, randomize_out_projections, tiny_model_config


class TestLrSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg, 100) == 1e-4
        assert lr_schedule(100, cfg, 100) == 0.0
        assert lr_schedule(50, cfg, 100) == pytest.approx(5e-5, abs=1e-18)

    def test_linear(self):
        cfg = TrainConfig()
        lrs = np.array([lr_schedule(s, cfg, 40) for s in range(41)])
        assert np.all(np.diff(lrs) <= 0)
        assert np.max(np.abs(np.diff(lrs, 2))) < 1e-18

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_schedule(11, TrainConfig(), 10)
        with pytest.raises(ContractError):
            lr_schedule(0, TrainConfig())

    def test_uses_configured_total(self):
        assert lr_schedule(5, TrainConfig(total_steps=10)) == pytest.approx(5e-5)


class TestClipGradNorm:
    def test_small_norm_unchanged(self):
        grads = [np.array([0.3, 0.4])]
        assert clip_grad_norm(grads, 1.0) == 1.0
        np.testing.assert_array_equal(grads[0], [0.3, 0.4])

    def test_scaled(self):
        grads = [np.array([3.0, 4.0])]
        assert clip_grad_norm(grads, 1.0) == pytest.approx(0.2)
        np.testing.assert_allclose(grads[0], [0.6, 0.8])

    def test_direction_preserved_across_tensors(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal((3, 4)) * 10, rng.standard_normal(5) * 10]
        before = [g.copy() for g in grads]
        factor = clip_grad_norm(grads, 1.5)
        assert 0 < factor < 1
        assert global_norm(grads) <= 1.5 + 1e-9
        for g, b in zip(grads, before):
            np.testing.assert_allclose(g, b * factor)

    def test_non_finite(self):
        with pytest.raises(TrainingDivergenceError):
            clip_grad_norm([np.array([1.0, np.nan])], 1.0)


class TestAdamW:
    def test_single_step_value(self):
        w = {"w": np.array([1.0])}
        adamw_step(w, {"w": np.array([1.0])}, OptimizerState(), 0.1, TrainConfig())
        assert w["w"][0] == pytest.approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01), abs=1e-15)
        assert w["w"][0] == pytest.approx(0.899, abs=1e-8)

    def test_zero_gradient_no_decay(self):
        w = {"w": np.array([0.7, -2.0])}
        adamw_step(w, {"w": np.zeros(2)}, OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(w["w"], [0.7, -2.0])

    def test_matches_plain_adam_without_decay(self):
        cfg = TrainConfig(weight_decay=0.0)
        rng = np.random.default_rng(1)
        grads = [rng.standard_normal(4) for _ in range(10)]
        w = {"w": rng.standard_normal(4)}
        ref = w["w"].copy()
        m = np.zeros(4)
        v = np.zeros(4)
        state = OptimizerState()
        for t, g in enumerate(grads, start=1):
            adamw_step(w, {"w": g}, state, 0.01, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g ** 2
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert state.step == 10
        assert np.max(np.abs(w["w"] - ref)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adamw_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptimizerState(), 0.1, TrainConfig())


class TestTrainStep:
    def _batch(self, model, n=2):
        s = model.specials
        return [(random_mel(seed=i), [s.sot, s.task] + [1 + i] * (i + 1) + [s.eot]) for i in range(n)]

    def test_collate_pads_right(self):
        assert collate_batch([[1, 2, 3], [4]], pad_id=0) == [[1, 2, 3], [4, 0, 0]]

    def test_epoch_batches_cover_each_item_once(self):
        batches = epoch_batches(10, 4, seed=0, epoch=1)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
        assert [b.tolist() for b in batches] == [b.tolist() for b in epoch_batches(10, 4, seed=0, epoch=1)]
        assert [b.tolist() for b in batches] != [b.tolist() for b in epoch_batches(10, 4, seed=0, epoch=2)]

    def test_deterministic_trajectory(self):
        cfg = TrainConfig(lr0=1e-2)
        runs = []
        for _ in range(2):
            model = SambaASR(tiny_model_config(), seed=0)
            state = OptimizerState.zeros_like(model.store.arrays())
            runs.append([train_step(self._batch(model), model, state, 1e-2, cfg)[0] for _ in range(3)])
        assert runs[0] == runs[1]

    def test_workers_do_not_change_result(self):
        cfg = TrainConfig(lr0=1e-2)
        results = []
        for workers in (1, 3):
            model = SambaASR(tiny_model_config(), seed=0)
            state = OptimizerState.zeros_like(model.store.arrays())
            loss, norm = train_step(self._batch(model, 3), model, state, 1e-2, cfg, workers=workers)
            results.append((loss, norm, model.store.arrays()["decoder.head.weight"].copy()))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]
        np.testing.assert_array_equal(results[0][2], results[1][2])

    def test_loss_decreases_on_one_sample(self):
        cfg = TrainConfig(lr0=1e-2)
        model = SambaASR(tiny_model_config(), seed=0)
        state = OptimizerState.zeros_like(model.store.arrays())
        batch = self._batch(model, 1)
        first, _ = train_step(batch, model, state, 1e-2, cfg)
        for _ in range(60):
            last, _ = train_step(batch, model, state, 1e-2, cfg)
        assert last < first / 2

    def test_empty_batch(self):
        model = SambaASR(tiny_model_config())
        with pytest.raises(ConfigError):
            train_step([], model, OptimizerState(), 1e-3, TrainConfig())

    @pytest.mark.slow
    def test_overfits_single_sample(self):
        cfg = TrainConfig(lr0=3e-3)
        model = SambaASR(tiny_model_config(d_model=32, vocab_size=64), seed=0)
        state = OptimizerState.zeros_like(model.store.arrays())
        batch = self._batch(model, 1)
        for _ in range(500):
            loss, _ = train_step(batch, model, state, 3e-3, cfg)
        assert loss < 0.01


class TestCheckpoint:
    def test_round_trip(self, temp_folder):
        model = SambaASR(tiny_model_config(), seed=2)
        randomize_out_projections(model)
        state = OptimizerState.zeros_like(model.store.arrays())
        state.m["decoder.head.bias"] += 0.5
        state.step = 7
        path = os.path.join(temp_folder, "model.ckpt")
        save_checkpoint(path, model, FrontendConfig(n_mels=4), TrainConfig(seed=2), state, step=7, epoch=1,
                        vocab_hash="abc", best_wer=0.25)

        ckpt = load_checkpoint(path)
        assert (ckpt.step, ckpt.epoch, ckpt.vocab_hash, ckpt.best_wer) == (7, 1, "abc", 0.25)
        assert ckpt.model == model.cfg
        assert ckpt.optimizer.step == 7
        np.testing.assert_allclose(ckpt.optimizer.m["decoder.head.bias"], 0.5)

        restored = ckpt.build_model()
        mel = random_mel()
        tokens = [9, 11, 1, 2, 3]
        before = model.forward(mel, tokens).data
        after = restored.forward(mel, tokens).data
        assert np.max(np.abs(before - after)) < 1e-5

    def test_without_optimizer(self, temp_folder):
        path = os.path.join(temp_folder, "model.ckpt")
        save_checkpoint(path, SambaASR(tiny_model_config()), FrontendConfig(n_mels=4), TrainConfig(), None, 0, 0, "h")
        assert load_checkpoint(path).optimizer is None

    def test_bad_magic(self, temp_folder):
        path = os.path.join(temp_folder, "bad.ckpt")
        with open(path, "wb") as f:
            f.write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, temp_folder):
        path = os.path.join(temp_folder, "model.ckpt")
        save_checkpoint(path, SambaASR(tiny_model_config()), FrontendConfig(n_mels=4), TrainConfig(), None, 0, 0, "h")
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, temp_folder):
        with pytest.raises(CheckpointError):
            load_checkpoint(os.path.join(temp_folder, "absent.ckpt"))


def read_metrics(out_dir):
    with open(os.path.join(out_dir, "metrics.csv"), newline="") as f:
        return list(csv.DictReader(f))


class TestLoadDataset:
    def test_blank_training_transcript_rejected(self, tone_corpus):
        train_manifest = tone_corpus["manifests"]["train"]
        entries = read_manifest(train_manifest)
        path = os.path.join(os.path.dirname(train_manifest), "blank.jsonl")
        write_manifest(path, [entries[0], ManifestEntry(audio=entries[1].audio, text="  ")])

        with pytest.raises(ManifestError, match="entry 2"):
            load_dataset(path, tone_corpus["vocab"], CORPUS_FRONTEND, 32)
        # validation sets may carry silence
        assert len(load_dataset(path, tone_corpus["vocab"], CORPUS_FRONTEND, 32, require_text=False)) == 2


class TestTrainLoop:
    def test_runs_and_records(self, tone_corpus, test_db):
        cfg = corpus_experiment(tone_corpus["vocab"].size)
        out_dir = os.path.join(tone_corpus["root"], "run")
        m = tone_corpus["manifests"]
        result = train_loop(m["train"], m["val"], tone_corpus["vocab_path"], out_dir, cfg)

        assert result.status == RunStatus.COMPLETED.value
        assert result.step == 2 * 2  # 8 training utterances, batch 4, 2 epochs
        assert os.path.exists(os.path.join(out_dir, "last.ckpt"))
        assert os.path.exists(os.path.join(out_dir, "best.ckpt"))

        rows = read_metrics(out_dir)
        assert len(rows) == cfg.train.epochs
        assert tuple(rows[0]) == METRICS_HEADER
        assert [int(r["epoch"]) for r in rows] == [1, 2]
        assert all(math.isfinite(float(r["train_loss"])) for r in rows)

        db = SessionLocal()
        try:
            run = db.query(TrainingRun).filter(TrainingRun.id == result.run_id).first()
            assert run.status == RunStatus.COMPLETED.value
            assert run.completed_steps == result.step
            assert run.progress_percent == 100.0
        finally:
            db.close()

    def test_deterministic_metrics(self, tone_corpus, test_db):
        cfg = corpus_experiment(tone_corpus["vocab"].size)
        m = tone_corpus["manifests"]
        tables = []
        for name in ("a", "b"):
            out_dir = os.path.join(tone_corpus["root"], name)
            train_loop(m["train"], m["val"], tone_corpus["vocab_path"], out_dir, cfg)
            tables.append([{k: v for k, v in r.items() if k != "wall_time_s"} for r in read_metrics(out_dir)])
        assert tables[0] == tables[1]

    def test_resume_continues(self, tone_corpus, test_db):
        m = tone_corpus["manifests"]
        out_dir = os.path.join(tone_corpus["root"], "resume")
        size = tone_corpus["vocab"].size
        first = train_loop(m["train"], m["val"], tone_corpus["vocab_path"], out_dir, corpus_experiment(size, epochs=1))
        second = train_loop(m["train"], m["val"], tone_corpus["vocab_path"], out_dir, corpus_experiment(size, epochs=2))
        assert first.step == 2
        assert second.step == 4
        assert [int(r["epoch"]) for r in read_metrics(out_dir)] == [1, 2]

    def test_vocab_size_mismatch(self, tone_corpus, test_db):
        m = tone_corpus["manifests"]
        cfg = corpus_experiment(tone_corpus["vocab"].size + 1)
        with pytest.raises(ConfigError):
            train_loop(m["train"], m["val"], tone_corpus["vocab_path"], os.path.join(tone_corpus["root"], "x"), cfg)

    def test_vocab_size_taken_from_vocab_when_unset(self, tone_corpus, test_db):
        m = tone_corpus["manifests"]
        cfg = ExperimentConfig(
            frontend=CORPUS_FRONTEND,
            model=ModelConfig(d_model=8, n_encoder_layers=1, n_decoder_layers=1, d_state=4,
                              n_mels=CORPUS_FRONTEND.n_mels, max_text_len=32),
            train=TrainConfig(lr0=1e-2, batch_size=4, epochs=1),
        )
        out_dir = os.path.join(tone_corpus["root"], "auto")
        result = train_loop(m["train"], m["val"], tone_corpus["vocab_path"], out_dir, cfg)
        assert result.status == "completed"
        assert load_checkpoint(result.last_checkpoint).model.vocab_size == tone_corpus["vocab"].size

    @pytest.mark.slow
    def test_desk_config_learns_tone_corpus(self, temp_folder, test_db):
        manifests = synth_corpus(SynthSpec(n_utterances=32, seed=0), os.path.join(temp_folder, "corpus"))
        vocab_path = os.path.join(temp_folder, "vocab.txt")
        save_vocab(train_bpe([e.text for e in read_manifest(manifests["train"])], 516), vocab_path)
        cfg = load_experiment_config(PROJECT_ROOT / "configs" / "desk.json")
        result = train_loop(manifests["train"], manifests["val"], vocab_path, os.path.join(temp_folder, "run"), cfg)
        assert result.step <= 2000
        assert float(result.metrics[-1]["train_loss"]) < 0.1

        model, vocab, frontend = load_for_inference(result.last_checkpoint, vocab_path)
        assert evaluate(manifests["train"], model, vocab, frontend).corpus_wer == 0.0
        assert evaluate(manifests["val"], model, vocab, frontend).corpus_wer <= 0.1


class TestRunRegistry:
    def test_cancel(self, test_db):
        db = SessionLocal()
        try:
            run_id = create_training_run(db, "/tmp/out", total_steps=10).id
        finally:
            db.close()
        assert cancel_run(run_id)["success"] is True
        assert cancel_run(run_id)["success"] is False
        assert cancel_run(run_id + 100) is None

    def test_mark_interrupted(self, test_db):
        db = SessionLocal()
        try:
            run_id = create_training_run(db, "/tmp/out", total_steps=10).id
        finally:
            db.close()
        assert mark_interrupted_runs() == 1
        db = SessionLocal()
        try:
            run = db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
            assert run.status == RunStatus.INTERRUPTED.value
            assert "interrupted" in run.error_message
        finally:
            db.close()


class TestExperimentConfig:
    @pytest.mark.parametrize("name", ["desk.json", "smoke.json"])
    def test_shipped_configs_load(self, name):
        cfg = load_experiment_config(PROJECT_ROOT / "configs" / name)
        assert cfg.frontend.n_mels == cfg.model.n_mels
        assert "vocab_size" not in cfg.model.model_fields_set

    def test_desk_config_uses_default_architecture(self):
        cfg = load_experiment_config(PROJECT_ROOT / "configs" / "desk.json")
        assert cfg.model.model_dump(exclude={"vocab_size"}) == ModelConfig().model_dump(exclude={"vocab_size"})
        assert cfg.frontend.n_mels == 80

    def test_defaults_without_file(self):
        cfg = load_experiment_config(None)
        assert cfg.train.lr0 == 1e-4
        assert cfg.model.d_inner == 2 * cfg.model.d_model

    def test_mel_width_must_agree(self, temp_folder):
        path = os.path.join(temp_folder, "c.json")
        with open(path, "w") as f:
            f.write('{"frontend": {"n_mels": 40}, "model": {"n_mels": 80}}')
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_not_json(self, temp_folder):
        path = os.path.join(temp_folder, "c.json")
        with open(path, "w") as f:
            f.write("lr0 = 1")
        with pytest.raises(ConfigError):
            load_experiment_config(path)
