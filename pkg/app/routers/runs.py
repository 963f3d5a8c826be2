import os
from typing import Optional
from fastapi import APIRouter, Depends, Query, HTTPException, BackgroundTasks
from sqlalchemy.orm import Session

from app.database import get_db, TrainingRun
from app.models import ExperimentConfig, RunStatus, RunStatusResponse, TrainRequest
from app.services.trainer import cancel_run, create_training_run, train_loop

router = APIRouter(prefix="/runs", tags=["Training"])

# Outcome of background training tasks, keyed by run id
_finished_runs = {}


def background_train(request: TrainRequest, config: ExperimentConfig, run_id: int):
    """Background task to train a model."""
    try:
        result = train_loop(request.manifest, request.val_manifest, request.vocab, request.out_dir, config,
                            run_id=run_id)
        _finished_runs[run_id] = {'status': result.status, 'step': result.step}
    except Exception as e:
        _finished_runs[run_id] = {'error': str(e)}


@router.post("")
async def start_training(
    request: TrainRequest,
    background_tasks: BackgroundTasks,
    db: Session = Depends(get_db)
):
    """
    Start training a model in the background.

    - **Resume capability**: if `out_dir` already holds `last.ckpt`, training
      continues from it (parameters, optimizer moments, step and epoch)
    - **Progress**: poll `/runs/{run_id}`; cancel with `DELETE /runs/{run_id}`

    The vocabulary must match `config.model.vocab_size`.
    """
    for label, path in (("manifest", request.manifest), ("val_manifest", request.val_manifest),
                        ("vocab", request.vocab)):
        if not os.path.isfile(path):
            raise HTTPException(status_code=400, detail=f"{label} not found: {path}")

    existing = db.query(TrainingRun).filter(
        TrainingRun.out_dir == request.out_dir,
        TrainingRun.status == RunStatus.IN_PROGRESS.value
    ).first()
    if existing:
        return {
            'message': 'Training already running for this out_dir',
            'run_id': existing.id,
            'status': existing.status,
            'completed_steps': existing.completed_steps,
            'total_steps': existing.total_steps
        }

    run = db.query(TrainingRun).filter(
        TrainingRun.out_dir == request.out_dir,
        TrainingRun.status == RunStatus.INTERRUPTED.value
    ).order_by(TrainingRun.id.desc()).first()
    if run:
        run.status = RunStatus.IN_PROGRESS.value
        run.error_message = None
        db.commit()
        message = 'Resuming interrupted training run'
    else:
        run = create_training_run(db, request.out_dir, total_steps=0)
        message = 'Training started'

    background_tasks.add_task(background_train, request, request.config or ExperimentConfig(), run.id)
    return {
        'message': message,
        'run_id': run.id,
        'status': RunStatus.IN_PROGRESS.value
    }


@router.get("", response_model=list[RunStatusResponse])
async def list_training_runs(
    status: Optional[str] = Query(None, description="Filter by status"),
    limit: int = Query(10, ge=1, le=100),
    db: Session = Depends(get_db)
):
    """List recent training runs."""
    query = db.query(TrainingRun)
    if status:
        query = query.filter(TrainingRun.status == status)
    runs = query.order_by(TrainingRun.started_at.desc(), TrainingRun.id.desc()).limit(limit).all()
    return [RunStatusResponse.model_validate(r) for r in runs]


@router.get("/{run_id}", response_model=RunStatusResponse)
async def get_training_run(
    run_id: int,
    db: Session = Depends(get_db)
):
    """
    Get the status of a training run: steps done, epoch, best validation WER,
    last checkpoint and any error message.
    """
    run = db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
    if not run:
        raise HTTPException(
            status_code=404,
            detail=f"Training run {run_id} not found"
        )
    return RunStatusResponse.model_validate(run)


@router.delete("/{run_id}")
async def cancel_training_run(run_id: int):
    """Cancel an in-progress or interrupted run. Training stops before its next step."""
    result = cancel_run(run_id)
    if result is None:
        raise HTTPException(
            status_code=404,
            detail=f"Training run {run_id} not found"
        )
    return result
