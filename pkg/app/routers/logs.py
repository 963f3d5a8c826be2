from datetime import date
from typing import Literal, Optional
from fastapi import APIRouter, Query
from fastapi.responses import PlainTextResponse

from app.services.logger import format_entry, logs_dir, read_logs

router = APIRouter(prefix="/logs", tags=["Logs"])

EventKind = Literal["training", "evaluation", "corpus", "bench"]
LevelName = Literal["DEBUG", "INFO", "WARNING", "ERROR"]


@router.get("")
async def get_logs(
    lines: int = Query(100, ge=1, le=1000, description="Number of log entries to return"),
    run_id: Optional[int] = Query(None, description="Only entries tagged with this training run"),
    event: Optional[EventKind] = Query(None, description="Only entries from this activity"),
    level: Optional[LevelName] = Query(None, description="Minimum severity"),
    day: Optional[date] = Query(None, description="Log file date (YYYY-MM-DD), default today"),
):
    """
    Get recent log entries, parsed into fields.

    - **lines**: Number of matching entries to return (default 100, max 1000)
    - **run_id**: Entries written by one training run
    - **event**: `training` (steps, epochs, checkpoints), `evaluation` (WER runs and skipped audio),
      `corpus` (synthesis and BPE training) or `bench`
    - **level**: Drop entries below this severity
    - **day**: Read an earlier day's file; see `/logs/files`
    """
    entries = read_logs(lines, run_id=run_id, event=event, min_level=level, day=day)
    return {
        "day": (day or date.today()).isoformat(),
        "total_lines": len(entries),
        "logs": entries,
    }


@router.get("/raw", response_class=PlainTextResponse)
async def get_logs_raw(
    lines: int = Query(100, ge=1, le=1000),
    run_id: Optional[int] = Query(None),
    event: Optional[EventKind] = Query(None),
    level: Optional[LevelName] = Query(None),
    day: Optional[date] = Query(None),
):
    """Same filters as `/logs`, as plain text (useful for viewing in terminal)."""
    entries = read_logs(lines, run_id=run_id, event=event, min_level=level, day=day)
    return "".join(format_entry(e) + "\n" for e in entries)


@router.get("/files")
async def list_log_files():
    """List the daily log files, newest first."""
    directory = logs_dir()
    log_files = sorted(directory.glob("samba_asr_*.log"), reverse=True)

    return {
        "log_directory": str(directory),
        "files": [
            {
                "name": f.name,
                "day": f.stem.replace("samba_asr_", "", 1),
                "size_bytes": f.stat().st_size,
                "modified": f.stat().st_mtime
            }
            for f in log_files
        ]
    }
