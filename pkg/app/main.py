from contextlib import asynccontextmanager
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.database import init_db
from app.errors import SambaError
from app.routers import runs, transcribe, evaluate, logs


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Initialize database on startup."""
    init_db()
    # Mark any in-progress training runs as interrupted (service was stopped)
    from app.services.trainer import mark_interrupted_runs
    mark_interrupted_runs()
    yield


app = FastAPI(
    title="Samba-ASR API",
    description="""
## Samba-ASR API

Speech recognition with a Mamba (selective state-space) encoder-decoder.

### Features

- **Training**: Train in the background with checkpointing, cancellation and resume
- **Transcription**: Upload a WAV file and receive its transcript
- **Evaluation**: Pooled word error rate over a manifest, with per-utterance rows
- **Logs**: Read back the service log

### Getting Started

1. **Start training**: `POST /runs` with manifests, vocabulary and output directory
2. **Check progress**: `GET /runs/{run_id}`
3. **Transcribe**: `POST /transcribe` with a WAV upload
4. **Evaluate**: `POST /evaluate` with a manifest
    """,
    version="1.0.0",
    lifespan=lifespan
)

# CORS middleware for frontend access
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(runs.router)
app.include_router(transcribe.router)
app.include_router(evaluate.router)
app.include_router(logs.router)


@app.get("/", tags=["Health"])
async def root():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "service": "Samba-ASR API",
        "version": "1.0.0"
    }


@app.get("/stats", tags=["Stats"])
async def get_stats():
    """Get overall statistics about training runs and evaluations."""
    from sqlalchemy import func
    from app.database import SessionLocal, TrainingRun, EvaluationRun

    db = SessionLocal()
    try:
        total_runs = db.query(func.count(TrainingRun.id)).scalar()

        completed_runs = db.query(func.count(TrainingRun.id)).filter(
            TrainingRun.status == "completed"
        ).scalar()

        active_runs = db.query(func.count(TrainingRun.id)).filter(
            TrainingRun.status == "in_progress"
        ).scalar()

        total_evaluations = db.query(func.count(EvaluationRun.id)).scalar()

        best_wer = db.query(func.min(EvaluationRun.corpus_wer)).scalar()

        return {
            "total_runs": total_runs or 0,
            "completed_runs": completed_runs or 0,
            "active_runs": active_runs or 0,
            "total_evaluations": total_evaluations or 0,
            "best_eval_wer": best_wer
        }
    finally:
        db.close()


@app.exception_handler(SambaError)
async def samba_exception_handler(request, exc):
    """Domain errors (bad audio, vocabulary mismatch, ...) are client errors."""
    return JSONResponse(
        status_code=400,
        content={
            "error": type(exc).__name__,
            "detail": str(exc)
        }
    )


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    """Global exception handler."""
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "detail": str(exc)
        }
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
