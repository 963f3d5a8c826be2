import tempfile
from functools import lru_cache
from pathlib import Path
from typing import Tuple

from fastapi import APIRouter, File, HTTPException, UploadFile

from app.config import get_settings
from app.models import FrontendConfig, TranscribeResponse
from app.services.audio import load_audio
from app.services.evaluation import load_for_inference
from app.services.samba import SambaASR
from app.services.tokenizer import Vocab

router = APIRouter(prefix="/transcribe", tags=["Transcribe"])


@lru_cache(maxsize=2)
def load_model(checkpoint: str, vocab: str, partition: int, workers: int) -> Tuple[SambaASR, Vocab, FrontendConfig]:
    return load_for_inference(checkpoint, vocab, partition, workers)


def default_model() -> Tuple[SambaASR, Vocab, FrontendConfig]:
    """The service model configured through SAMBA_ASR_CHECKPOINT / SAMBA_ASR_VOCAB."""
    settings = get_settings()
    if settings.checkpoint is None or settings.vocab is None:
        raise HTTPException(
            status_code=503,
            detail="No model configured: set SAMBA_ASR_CHECKPOINT and SAMBA_ASR_VOCAB"
        )
    return load_model(str(settings.checkpoint), str(settings.vocab), settings.scan_partition,
                       settings.scan_workers)


@router.post("", response_model=TranscribeResponse)
async def transcribe_upload(audio: UploadFile = File(..., description="RIFF/WAVE file, PCM16 or float32")):
    """
    Transcribe an uploaded WAV file with the service model.

    The file is resampled to 16 kHz, normalized and padded or trimmed to the
    model's input length before greedy decoding.
    """
    model, vocab, frontend = default_model()
    payload = await audio.read()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "upload.wav"
        path.write_bytes(payload)
        mel = load_audio(path, frontend)
    text, ids = model.transcribe(mel, vocab)
    return TranscribeResponse(transcript=text, tokens=ids)
