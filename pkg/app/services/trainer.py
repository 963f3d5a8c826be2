"""
Training loop with run tracking and resume.

Each batch item is differentiated on its own tape (optionally on worker
threads); item gradients are then summed in batch order, so results do not
depend on the worker count. Checkpoints are written at the end of every epoch
(`last.ckpt`) and whenever validation WER improves (`best.ckpt`). Starting
again on the same out_dir resumes from `last.ckpt`.
"""
import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sqlalchemy.orm import Session

from app.config import get_settings
from app.database import SessionLocal, TrainingRun
from app.errors import ConfigError, IngestError, LengthError, ManifestError, NumericError, \
    TrainingDivergenceError, VocabError
from app.models import ExperimentConfig, FrontendConfig, RunStatus, TrainConfig
from app.services import numerics as nx
from app.services.audio import MelSpectrogram, load_audio
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.evaluation import read_manifest, resolve_audio, word_errors
from app.services.logger import RunLogger, get_run_logger
from app.services.optim import OptimizerState, adamw_step, clip_grad_norm, lr_schedule
from app.services.samba import SambaASR
from app.services.tokenizer import Vocab, decode, encode, load_vocab, vocab_hash

PathLike = Union[str, Path]

METRICS_HEADER = ("step", "epoch", "train_loss", "val_loss", "wer", "lr", "wall_time_s")
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
METRICS_FILE = "metrics.csv"


@dataclass
class Utterance:
    audio: str
    text: str
    mel: MelSpectrogram
    tokens: List[int]


@dataclass
class TrainResult:
    run_id: int
    status: str
    step: int
    best_wer: Optional[float]
    last_checkpoint: Optional[Path]
    metrics: List[Dict[str, str]] = field(default_factory=list)


class RunCancelled(Exception):
    """Raised inside the loop when the tracked run was cancelled."""


def load_dataset(manifest_path: PathLike, vocab: Vocab, frontend: FrontendConfig,
                 max_text_len: int, require_text: bool = True) -> List[Utterance]:
    """Featurize every manifest entry; any unreadable file aborts with its path.

    Training sets (`require_text`) reject blank transcripts.
    """
    utterances = []
    for lineno, entry in enumerate(read_manifest(manifest_path), start=1):
        if require_text and not entry.text.strip():
            raise ManifestError(f"{manifest_path}: entry {lineno} ({entry.audio}) has an empty transcript")
        audio_path = resolve_audio(manifest_path, entry)
        if not audio_path.is_file():
            raise ManifestError(f"{manifest_path}: audio not found: {audio_path}")
        try:
            mel = load_audio(audio_path, frontend)
        except IngestError as e:
            raise IngestError(f"{audio_path}: {e}") from e
        tokens = encode(entry.text, vocab, wrap=True)
        if len(tokens) > max_text_len:
            raise LengthError(f"{entry.audio}: {len(tokens)} tokens exceed max_text_len={max_text_len}")
        utterances.append(Utterance(entry.audio, entry.text, mel, tokens))
    return utterances


def collate_batch(token_seqs: Sequence[Sequence[int]], pad_id: int) -> List[List[int]]:
    """Right-pad every sequence with PAD to the longest in the batch."""
    longest = max(len(seq) for seq in token_seqs)
    return [list(seq) + [pad_id] * (longest - len(seq)) for seq in token_seqs]


def _item_gradients(model: SambaASR, mel: MelSpectrogram, tokens: List[int]) -> Tuple[float, List[np.ndarray]]:
    with nx.Tape():
        loss = model.loss(mel, tokens)
        grads = nx.gradients(loss, model.store.tensors())
    return loss.item(), grads


def train_step(batch: Sequence[Tuple[MelSpectrogram, Sequence[int]]], model: SambaASR, state: OptimizerState,
               lr: float, cfg: TrainConfig, workers: int = 1) -> Tuple[float, float]:
    """One optimizer update on the batch mean loss; returns (loss, pre-clip gradient norm)."""
    if not batch:
        raise ConfigError("empty batch")
    padded = collate_batch([tokens for _, tokens in batch], model.specials.pad)
    items = [(mel, tokens) for (mel, _), tokens in zip(batch, padded)]

    try:
        if workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda it: _item_gradients(model, *it), items))
        else:
            results = [_item_gradients(model, *it) for it in items]
    except NumericError as e:
        raise TrainingDivergenceError(f"non-finite value in forward/backward: {e}") from e

    n = len(results)
    loss = sum(item_loss for item_loss, _ in results) / n
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f"loss became {loss}")
    grads = [np.zeros(t.shape) for t in model.store.tensors()]
    for _, item_grads in results:
        for acc, g in zip(grads, item_grads):
            acc += g
    for g in grads:
        g /= n

    grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    clip_grad_norm(grads, cfg.clip_norm)
    adamw_step(model.store.arrays(), dict(zip(model.store, grads)), state, lr, cfg)
    return loss, grad_norm


def validate(model: SambaASR, data: Sequence[Utterance], vocab: Vocab) -> Tuple[float, float]:
    """(mean next-token loss, pooled greedy-decode WER) over `data`."""
    if not data:
        return float("nan"), float("nan")
    losses = []
    edits = ref_words = 0
    for utt in data:
        losses.append(model.loss(utt.mel, utt.tokens).item())
        e, n = word_errors(utt.text, decode(model.greedy_decode(utt.mel), vocab))
        edits += e
        ref_words += n
    return float(np.mean(losses)), edits / max(1, ref_words)


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return math.ceil(n_items / batch_size)


def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


# Run registry

def create_training_run(db: Session, out_dir: str, total_steps: int) -> TrainingRun:
    run = TrainingRun(out_dir=out_dir, status=RunStatus.IN_PROGRESS.value, total_steps=total_steps,
                      completed_steps=0, epoch=0)
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def get_resumable_run(db: Session, out_dir: str) -> Optional[TrainingRun]:
    """Latest interrupted or in-progress run for out_dir, picked up again instead of opening a new one."""
    return db.query(TrainingRun).filter(
        TrainingRun.out_dir == out_dir,
        TrainingRun.status.in_([RunStatus.IN_PROGRESS.value, RunStatus.INTERRUPTED.value]),
    ).order_by(TrainingRun.id.desc()).first()


def update_training_run(db: Session, run: TrainingRun, step: int, epoch: int, best_wer: Optional[float] = None,
                        checkpoint: Optional[str] = None, status: Optional[str] = None, error: Optional[str] = None):
    run.completed_steps = step
    run.epoch = epoch
    if best_wer is not None:
        run.best_wer = best_wer
    if checkpoint:
        run.last_checkpoint = checkpoint
    if status:
        run.status = status
        if status in (RunStatus.COMPLETED.value, RunStatus.FAILED.value, RunStatus.CANCELLED.value):
            run.completed_at = datetime.utcnow()
    if error:
        run.error_message = error
    db.commit()


def _is_cancelled(db: Session, run: TrainingRun) -> bool:
    db.refresh(run, attribute_names=["status"])
    return run.status == RunStatus.CANCELLED.value


def get_run(run_id: int) -> Optional[TrainingRun]:
    db = SessionLocal()
    try:
        return db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
    finally:
        db.close()


def list_runs(limit: int = 50) -> List[TrainingRun]:
    db = SessionLocal()
    try:
        return db.query(TrainingRun).order_by(TrainingRun.id.desc()).limit(limit).all()
    finally:
        db.close()


def mark_interrupted_runs() -> int:
    """
    Mark any in_progress runs as interrupted on service startup.
    Starting training again on the same out_dir resumes from its last checkpoint.
    """
    db = SessionLocal()
    try:
        runs = db.query(TrainingRun).filter(TrainingRun.status == RunStatus.IN_PROGRESS.value).all()
        for run in runs:
            run.status = RunStatus.INTERRUPTED.value
            run.error_message = "Training was interrupted (service stopped). Train again on the same out_dir to resume."
            get_run_logger(run.id).training_interrupted()
        db.commit()
        return len(runs)
    finally:
        db.close()


def cancel_run(run_id: int) -> Optional[dict]:
    """Cancel an in-progress or interrupted run; the loop stops before its next step."""
    db = SessionLocal()
    try:
        run = db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
        if not run:
            return None
        if run.status in (RunStatus.COMPLETED.value, RunStatus.CANCELLED.value, RunStatus.FAILED.value):
            return {"success": False, "message": f"Run is already {run.status}", "run_id": run_id}
        run.status = RunStatus.CANCELLED.value
        run.error_message = "Run was cancelled by user"
        run.completed_at = datetime.utcnow()
        db.commit()
        return {"success": True, "message": "Run cancelled successfully", "run_id": run_id}
    finally:
        db.close()


# Loop

def _read_metrics(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _append_metrics(path: Path, row: Dict[str, object]):
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        if new_file:
            writer.writeheader()
        writer.writerow(row)


def train_loop(manifest: PathLike, val_manifest: PathLike, vocab_path: PathLike, out_dir: PathLike,
               cfg: ExperimentConfig, run_id: Optional[int] = None) -> TrainResult:
    """Train to the configured number of epochs (or total_steps), resuming from out_dir/last.ckpt."""
    settings = get_settings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(vocab_path)
    if "vocab_size" not in cfg.model.model_fields_set:
        cfg = cfg.model_copy(update={"model": cfg.model.model_copy(update={"vocab_size": vocab.size})})
    elif vocab.size != cfg.model.vocab_size:
        raise ConfigError(f"model.vocab_size={cfg.model.vocab_size} but {vocab_path} has {vocab.size} ids")
    v_hash = vocab_hash(vocab)

    train_data = load_dataset(manifest, vocab, cfg.frontend, cfg.model.max_text_len)
    val_data = load_dataset(val_manifest, vocab, cfg.frontend, cfg.model.max_text_len, require_text=False)
    if not train_data:
        raise ManifestError(f"{manifest}: no training utterances")
    tc = cfg.train
    per_epoch = steps_per_epoch(len(train_data), tc.batch_size)
    total_steps = tc.total_steps or tc.epochs * per_epoch

    db = SessionLocal()
    run = None
    tracked_id = run_id
    logger: Optional[RunLogger] = None
    step, epoch = 0, 0
    best_wer: Optional[float] = None
    last_ckpt = out_dir / LAST_CHECKPOINT
    metrics_path = out_dir / METRICS_FILE
    try:
        if run_id is not None:
            run = db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
        if run is None:
            run = get_resumable_run(db, str(out_dir))
        if run is None:
            run = create_training_run(db, str(out_dir), total_steps)
        tracked_id = run.id
        logger = get_run_logger(tracked_id)

        model = SambaASR(cfg.model, seed=tc.seed, scan_partition=settings.scan_partition,
                         scan_workers=settings.scan_workers)
        state = OptimizerState.zeros_like(model.store.arrays())
        if last_ckpt.exists():
            ckpt = load_checkpoint(last_ckpt)
            if ckpt.vocab_hash != v_hash:
                raise VocabError(f"{last_ckpt} was trained with a different vocabulary")
            model = ckpt.build_model(settings.scan_partition, settings.scan_workers)
            state = ckpt.optimizer or state
            step, epoch, best_wer = ckpt.step, ckpt.epoch, ckpt.best_wer
            logger.training_resumed(str(last_ckpt), step)
        else:
            metrics_path.unlink(missing_ok=True)
            logger.training_started(str(out_dir), total_steps, model.parameter_count())
        run.status = RunStatus.IN_PROGRESS.value
        run.total_steps = total_steps
        update_training_run(db, run, step, epoch, best_wer)

        started = time.perf_counter()
        while epoch < tc.epochs and step < total_steps:
            epoch_losses = []
            for idx in epoch_batches(len(train_data), tc.batch_size, tc.seed, epoch):
                if step >= total_steps:
                    break
                if _is_cancelled(db, run):
                    raise RunCancelled()
                lr = lr_schedule(step, tc, total_steps)
                batch = [(train_data[i].mel, train_data[i].tokens) for i in idx]
                loss, grad_norm = train_step(batch, model, state, lr, tc, tc.workers)
                step += 1
                epoch_losses.append(loss)
                logger.step_logged(step, loss, grad_norm, lr)
                update_training_run(db, run, step, epoch)

            epoch += 1
            val_loss, val_wer = validate(model, val_data, vocab)
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            _append_metrics(metrics_path, {
                "step": step, "epoch": epoch, "train_loss": f"{train_loss:.8f}", "val_loss": f"{val_loss:.8f}",
                "wer": f"{val_wer:.6f}", "lr": f"{lr_schedule(step, tc, total_steps):.8e}",
                "wall_time_s": f"{time.perf_counter() - started:.3f}",
            })
            logger.epoch_completed(epoch, train_loss, val_loss, val_wer)

            improved = not math.isnan(val_wer) and (best_wer is None or val_wer < best_wer)
            if improved:
                best_wer = val_wer
            save_checkpoint(last_ckpt, model, cfg.frontend, tc, state, step, epoch, v_hash, best_wer)
            logger.checkpoint_saved(str(last_ckpt), step)
            if improved:
                best_path = out_dir / BEST_CHECKPOINT
                save_checkpoint(best_path, model, cfg.frontend, tc, state, step, epoch, v_hash, best_wer)
                logger.checkpoint_saved(str(best_path), step)
            update_training_run(db, run, step, epoch, best_wer, str(last_ckpt))

        update_training_run(db, run, step, epoch, best_wer, status=RunStatus.COMPLETED.value)
        logger.training_completed(step, best_wer)
        status = RunStatus.COMPLETED.value

    except RunCancelled:
        logger.training_cancelled()
        status = RunStatus.CANCELLED.value
    except Exception as e:
        if logger:
            logger.training_failed(str(e))
        if run is not None:
            update_training_run(db, run, step, epoch, status=RunStatus.FAILED.value, error=str(e))
        raise
    finally:
        db.close()

    return TrainResult(run_id=tracked_id, status=status, step=step, best_wer=best_wer,
                       last_checkpoint=last_ckpt if last_ckpt.exists() else None,
                       metrics=_read_metrics(metrics_path))
