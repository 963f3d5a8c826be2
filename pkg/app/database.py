from datetime import datetime

from sqlalchemy import create_engine, Column, Integer, String, DateTime, Float, Text
from sqlalchemy.orm import sessionmaker, declarative_base

from app.config import get_settings

_settings = get_settings()
_settings.db_path.parent.mkdir(parents=True, exist_ok=True)
DATABASE_URL = _settings.database_url

engine = create_engine(DATABASE_URL, connect_args={"check_same_thread": False})
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


class TrainingRun(Base):
    """Tracks training runs for progress reporting and resume."""
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    out_dir = Column(String, nullable=False, index=True)
    status = Column(String, default="in_progress")  # in_progress, completed, failed, interrupted, cancelled
    total_steps = Column(Integer, default=0)
    completed_steps = Column(Integer, default=0)
    epoch = Column(Integer, default=0)
    best_wer = Column(Float, nullable=True)
    last_checkpoint = Column(String, nullable=True)
    error_message = Column(Text, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime, nullable=True)

    @property
    def run_id(self) -> int:
        return self.id

    @property
    def progress_percent(self) -> float:
        if not self.total_steps:
            return 0.0
        return round(self.completed_steps / self.total_steps * 100, 2)


class EvaluationRun(Base):
    """One evaluation of a checkpoint against a manifest."""
    __tablename__ = "evaluation_runs"

    id = Column(Integer, primary_key=True, index=True)
    checkpoint = Column(String, nullable=False)
    manifest = Column(String, nullable=False)
    corpus_wer = Column(Float, nullable=False)
    n_utterances = Column(Integer, default=0)
    n_skipped = Column(Integer, default=0)
    real_time_factor = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)


def init_db():
    """Initialize the database tables."""
    Base.metadata.create_all(bind=engine)


def get_db():
    """Dependency to get database session."""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
