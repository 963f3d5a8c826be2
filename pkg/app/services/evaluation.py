"""
Word error rate, manifests and corpus evaluation.

Corpus WER is pooled: total word edits over total reference words.
"""
import csv
import json
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from editdistance import eval as levenshtein
from pydantic import ValidationError

from app.database import EvaluationRun, SessionLocal
from app.errors import ManifestError, VocabError
from app.models import FrontendConfig, ManifestEntry, UtteranceResult
from app.services.audio import features, load_wav
from app.services.checkpoint import load_checkpoint
from app.services.logger import RunLogger, app_logger
from app.services.samba import SambaASR
from app.services.tokenizer import Vocab, load_vocab, vocab_hash

PathLike = Union[str, Path]
_PUNCTUATION = str.maketrans("", "", string.punctuation)

REPORT_HEADER = ("audio", "ref", "hyp", "wer")


def normalize_text(text: str) -> List[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return text.lower().translate(_PUNCTUATION).split()


def word_errors(reference: str, hypothesis: str) -> Tuple[int, int]:
    """(edit distance in words, reference word count)."""
    ref = normalize_text(reference)
    hyp = normalize_text(hypothesis)
    return levenshtein(ref, hyp), len(ref)


def wer(reference: str, hypothesis: str) -> float:
    edits, n_ref = word_errors(reference, hypothesis)
    return edits / max(1, n_ref)


# Manifests

def read_manifest(path: PathLike) -> List[ManifestEntry]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entries.append(ManifestEntry(**json.loads(line)))
        except (json.JSONDecodeError, TypeError, ValidationError) as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
    return entries


def write_manifest(path: PathLike, entries: Sequence[ManifestEntry]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps({"audio": entry.audio, "text": entry.text}, ensure_ascii=False) + "\n")


def resolve_audio(manifest_path: PathLike, entry: ManifestEntry) -> Path:
    audio = Path(entry.audio)
    return audio if audio.is_absolute() else Path(manifest_path).parent / audio


# Evaluation

@dataclass
class EvaluationReport:
    rows: List[UtteranceResult] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    total_edits: int = 0
    total_ref_words: int = 0
    audio_seconds: float = 0.0
    decode_seconds: float = 0.0

    @property
    def corpus_wer(self) -> float:
        return self.total_edits / max(1, self.total_ref_words)

    @property
    def real_time_factor(self) -> float:
        return self.decode_seconds / self.audio_seconds if self.audio_seconds > 0 else 0.0


def _transcribe_entry(model: SambaASR, vocab: Vocab, frontend: FrontendConfig, audio_path: Path):
    w = load_wav(audio_path)
    start = time.perf_counter()
    hyp, _ = model.transcribe(features(w, frontend), vocab)
    return hyp, w.duration_s, time.perf_counter() - start


def evaluate(manifest_path: PathLike, model: SambaASR, vocab: Vocab, frontend: FrontendConfig,
             workers: int = 1, logger: Optional[RunLogger] = None) -> EvaluationReport:
    """Transcribe every manifest entry; entries whose audio is missing are skipped and listed."""
    logger = logger or app_logger
    entries = read_manifest(manifest_path)
    logger.evaluation_started(str(manifest_path), len(entries))

    report = EvaluationReport()
    present = []
    for entry in entries:
        audio_path = resolve_audio(manifest_path, entry)
        if audio_path.is_file():
            present.append((entry, audio_path))
        else:
            report.skipped.append(entry.audio)
            logger.utterance_skipped(entry.audio, "audio file not found")

    # map() yields in submission order, so rows follow the manifest
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outputs = list(pool.map(lambda item: _transcribe_entry(model, vocab, frontend, item[1]), present))

    for (entry, _), (hyp, duration, elapsed) in zip(present, outputs):
        edits, n_ref = word_errors(entry.text, hyp)
        report.rows.append(UtteranceResult(audio=entry.audio, ref=entry.text, hyp=hyp,
                                           wer=edits / max(1, n_ref)))
        report.total_edits += edits
        report.total_ref_words += n_ref
        report.audio_seconds += duration
        report.decode_seconds += elapsed

    logger.evaluation_completed(report.corpus_wer, len(report.skipped))
    return report


def load_for_inference(checkpoint_path: PathLike, vocab_path: PathLike, scan_partition: int = 0,
                       scan_workers: int = 1) -> Tuple[SambaASR, Vocab, FrontendConfig]:
    """Load a checkpoint and vocabulary, refusing a vocabulary the checkpoint was not trained with."""
    ckpt = load_checkpoint(checkpoint_path)
    vocab = load_vocab(vocab_path)
    if vocab_hash(vocab) != ckpt.vocab_hash:
        raise VocabError(f"{vocab_path} does not match the vocabulary recorded in {checkpoint_path}")
    return ckpt.build_model(scan_partition, scan_workers), vocab, ckpt.frontend


def write_report(path: PathLike, report: EvaluationReport):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for row in report.rows:
            writer.writerow([row.audio, row.ref, row.hyp, f"{row.wer:.6f}"])


def evaluate_many(manifests: Dict[str, PathLike], model: SambaASR, vocab: Vocab, frontend: FrontendConfig,
                  workers: int = 1) -> Tuple[Dict[str, EvaluationReport], float]:
    """Evaluate several corpora; returns per-corpus reports and the unweighted mean of their WERs."""
    reports = {name: evaluate(path, model, vocab, frontend, workers) for name, path in manifests.items()}
    average = sum(r.corpus_wer for r in reports.values()) / max(1, len(reports))
    return reports, average


def record_evaluation(checkpoint: PathLike, manifest: PathLike, report: EvaluationReport) -> int:
    """Store the outcome in the evaluation registry; returns the row id."""
    db = SessionLocal()
    try:
        row = EvaluationRun(checkpoint=str(checkpoint), manifest=str(manifest), corpus_wer=report.corpus_wer,
                            n_utterances=len(report.rows), n_skipped=len(report.skipped),
                            real_time_factor=report.real_time_factor)
        db.add(row)
        db.commit()
        db.refresh(row)
        return row.id
    finally:
        db.close()
