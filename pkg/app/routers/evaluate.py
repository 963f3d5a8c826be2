import os

from fastapi import APIRouter, HTTPException

from app.config import get_settings
from app.models import EvaluateRequest, EvaluateResponse
from app.routers.transcribe import default_model, load_model
from app.services.evaluation import evaluate, record_evaluation

router = APIRouter(prefix="/evaluate", tags=["Evaluate"])


@router.post("", response_model=EvaluateResponse)
def evaluate_manifest(request: EvaluateRequest):
    """
    Evaluate a manifest and return the pooled WER with one row per utterance.

    Uses the service model unless both `checkpoint` and `vocab` are given.
    Entries whose audio is missing are listed under `skipped`.
    """
    if not os.path.isfile(request.manifest):
        raise HTTPException(status_code=400, detail=f"Manifest not found: {request.manifest}")

    settings = get_settings()
    if request.checkpoint and request.vocab:
        model, vocab, frontend = load_model(request.checkpoint, request.vocab, settings.scan_partition,
                                             settings.scan_workers)
        checkpoint = request.checkpoint
    else:
        model, vocab, frontend = default_model()
        checkpoint = str(settings.checkpoint)

    report = evaluate(request.manifest, model, vocab, frontend, settings.scan_workers)
    record_evaluation(checkpoint, request.manifest, report)
    return EvaluateResponse(
        corpus_wer=report.corpus_wer,
        n_utterances=len(report.rows),
        skipped=report.skipped,
        real_time_factor=report.real_time_factor,
        rows=report.rows,
    )
