import logging
import re
from datetime import date, datetime
from pathlib import Path
from typing import Dict, List, Optional

from app.config import get_settings

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def logs_dir() -> Path:
    path = get_settings().logs_dir
    path.mkdir(parents=True, exist_ok=True)
    return path


def _log_file(day: Optional[date] = None) -> Path:
    day = day or datetime.now().date()
    return logs_dir() / f"samba_asr_{day.isoformat()}.log"


class RunLogger:
    """Logger for training, evaluation and corpus activities."""

    def __init__(self, run_id: Optional[int] = None):
        self.run_id = run_id
        self.logger = self._setup_logger()

    def _setup_logger(self) -> logging.Logger:
        """Set up logger with file and console handlers."""
        logger_name = f"samba_asr.run_{self.run_id}" if self.run_id else "samba_asr"
        logger = logging.getLogger(logger_name)

        # Avoid duplicate handlers
        if logger.handlers:
            return logger

        logger.setLevel(logging.DEBUG)
        logger.propagate = False

        file_handler = logging.FileHandler(_log_file(), encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(get_settings().log_level.upper())
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        logger.addHandler(console_handler)

        return logger

    def _format_message(self, message: str) -> str:
        if self.run_id:
            return f"[Run {self.run_id}] {message}"
        return message

    def info(self, message: str):
        self.logger.info(self._format_message(message))

    def debug(self, message: str):
        self.logger.debug(self._format_message(message))

    def warning(self, message: str):
        self.logger.warning(self._format_message(message))

    def error(self, message: str):
        self.logger.error(self._format_message(message))

    def training_started(self, out_dir: str, total_steps: int, n_params: int):
        self.info(f"TRAINING STARTED - Out: {out_dir}, Steps: {total_steps}, Parameters: {n_params}")

    def training_resumed(self, checkpoint: str, step: int):
        self.info(f"TRAINING RESUMED - From: {checkpoint} at step {step}")

    def step_logged(self, step: int, loss: float, grad_norm: float, lr: float):
        self.debug(f"STEP {step}: loss={loss:.5f} grad_norm={grad_norm:.4f} lr={lr:.3e}")

    def epoch_completed(self, epoch: int, train_loss: float, val_loss: float, wer: float):
        self.info(f"EPOCH {epoch} - train_loss={train_loss:.4f} val_loss={val_loss:.4f} wer={wer:.4f}")

    def checkpoint_saved(self, path: str, step: int):
        self.debug(f"Checkpoint: {Path(path).name} (step {step})")

    def training_completed(self, steps: int, best_wer: Optional[float]):
        best = f"{best_wer:.4f}" if best_wer is not None else "n/a"
        self.info(f"TRAINING COMPLETED - Steps: {steps}, Best WER: {best}")

    def training_failed(self, error: str):
        self.error(f"TRAINING FAILED - {error}")

    def training_interrupted(self):
        self.warning("TRAINING INTERRUPTED - Service stopped during training")

    def training_cancelled(self):
        self.warning("TRAINING CANCELLED - User cancelled the run")

    def evaluation_started(self, manifest: str, n_utterances: int):
        self.info(f"EVALUATION STARTED - Manifest: {manifest}, Utterances: {n_utterances}")

    def evaluation_completed(self, corpus_wer: float, skipped: int):
        self.info(f"EVALUATION COMPLETED - WER: {corpus_wer:.4f}, Skipped: {skipped}")

    def utterance_skipped(self, audio: str, reason: str):
        self.warning(f"Skipped: {Path(audio).name} - {reason}")

    def corpus_written(self, out_dir: str, n_utterances: int):
        self.info(f"CORPUS WRITTEN - {n_utterances} utterances in {out_dir}")

    def vocab_trained(self, path: str, n_merges: int):
        self.info(f"VOCAB TRAINED - {n_merges} merges -> {path}")

    def bench_row(self, length: int, mean_ms: float):
        self.debug(f"Bench: T={length} mean={mean_ms:.3f} ms")


# Global logger instance for general logging
app_logger = RunLogger()


def get_run_logger(run_id: int) -> RunLogger:
    """Get a logger for a specific training run."""
    return RunLogger(run_id)


# Message prefixes written by the RunLogger event methods, grouped by activity
EVENT_PATTERNS: Dict[str, re.Pattern] = {
    "training": re.compile(r"^(TRAINING |STEP |EPOCH |Checkpoint: )"),
    "evaluation": re.compile(r"^(EVALUATION |Skipped: )"),
    "corpus": re.compile(r"^(CORPUS |VOCAB )"),
    "bench": re.compile(r"^Bench: "),
}
LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
_RUN_TAG = re.compile(r"^\[Run (\d+)\] ")


def parse_log_line(line: str) -> Optional[dict]:
    """Split a `time | LEVEL | [Run N] message` line; None for lines not in that format."""
    parts = line.rstrip("\n").split(" | ", 2)
    if len(parts) != 3 or parts[1].strip() not in LEVELS:
        return None
    message = parts[2]
    run_id = None
    tag = _RUN_TAG.match(message)
    if tag:
        run_id = int(tag.group(1))
        message = message[tag.end():]
    event = next((name for name, pattern in EVENT_PATTERNS.items() if pattern.match(message)), None)
    return {"time": parts[0], "level": parts[1].strip(), "run_id": run_id, "event": event, "message": message}


def read_logs(lines: int = 100, run_id: Optional[int] = None, event: Optional[str] = None,
              min_level: Optional[str] = None, day: Optional[date] = None) -> List[dict]:
    """Last `lines` parsed entries of one day's log file matching every given filter."""
    log_file = _log_file(day)
    if not log_file.exists():
        return []

    floor = LEVELS.index(min_level) if min_level else 0
    with open(log_file, "r", encoding="utf-8") as f:
        entries = [entry for entry in map(parse_log_line, f) if entry is not None]
    return [
        e for e in entries
        if (run_id is None or e["run_id"] == run_id)
        and (event is None or e["event"] == event)
        and LEVELS.index(e["level"]) >= floor
    ][-lines:]


def format_entry(entry: dict) -> str:
    tag = f"[Run {entry['run_id']}] " if entry["run_id"] is not None else ""
    return f"{entry['time']} | {entry['level']:<8} | {tag}{entry['message']}"
