import json
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError
from app.models import ExperimentConfig

PROJECT_ROOT = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """Process-wide settings, overridable through SAMBA_ASR_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="SAMBA_ASR_", env_file=".env", extra="ignore")

    db_path: Path = Field(default=PROJECT_ROOT / "data" / "samba_asr.db")
    logs_dir: Path = Field(default=PROJECT_ROOT / "logs")
    log_level: str = "INFO"

    # Default model served by the HTTP layer
    checkpoint: Optional[Path] = None
    vocab: Optional[Path] = None

    # 0 means one partition covering the whole sequence
    scan_partition: int = Field(default=0, ge=0)
    scan_workers: int = Field(default=1, ge=1)

    @property
    def database_url(self) -> str:
        return f"sqlite:///{self.db_path}"


def describe_validation_error(e: ValidationError) -> str:
    """One-line summary of a pydantic ValidationError: `field: message; ...`."""
    return "; ".join(f"{'.'.join(map(str, err['loc'])) or 'value'}: {err['msg']}" for err in e.errors())


@lru_cache
def get_settings() -> Settings:
    return Settings()


def load_experiment_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Read a JSON experiment config ({"frontend": ..., "model": ..., "train": ...}); missing keys take defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ExperimentConfig(**data)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {describe_validation_error(e)}") from e
    except (json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
