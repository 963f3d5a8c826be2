from datetime import datetime
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


class RunStatus(str, Enum):
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"
    INTERRUPTED = "interrupted"
    CANCELLED = "cancelled"


# Experiment configuration
class FrontendConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_rate: int = Field(default=16000, gt=0)
    win_samples: int = Field(default=400, gt=0, description="25 ms analysis window")
    hop_samples: int = Field(default=160, gt=0, description="10 ms hop")
    n_fft: int = Field(default=400, gt=0)
    n_mels: int = Field(default=80, gt=0)
    target_samples: int = Field(default=160000, ge=1, description="Pad/trim length N_samples")
    log_floor: float = Field(default=1e-10, gt=0)
    f_max: float = Field(default=8000.0, gt=0)
    stft_method: Literal["dft", "fft"] = "dft"

    @model_validator(mode="after")
    def _check_window(self) -> "FrontendConfig":
        if self.win_samples > self.n_fft:
            raise ValueError("win_samples must not exceed n_fft")
        if self.hop_samples > self.win_samples:
            raise ValueError("hop_samples must not exceed win_samples")
        if self.target_samples < self.win_samples:
            raise ValueError("target_samples must hold at least one window")
        return self

    @property
    def n_frames(self) -> int:
        return 1 + (self.target_samples - self.win_samples) // self.hop_samples


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_model: int = Field(default=64, gt=0)
    n_encoder_layers: int = Field(default=4, gt=0)
    n_decoder_layers: int = Field(default=4, gt=0)
    d_state: int = Field(default=16, gt=0)
    d_inner: Optional[int] = Field(default=None, gt=0, description="Defaults to 2 * d_model")
    conv_kernel: int = Field(default=4, gt=0)
    vocab_size: int = Field(default=516, gt=0)
    max_text_len: int = Field(default=128, ge=3)
    n_mels: int = Field(default=80, gt=0)
    use_skip: bool = Field(default=True, description="Train the D_skip feedthrough; False pins it to zero")
    scan_method: Literal["parallel", "sequential"] = "parallel"

    @model_validator(mode="before")
    @classmethod
    def _default_inner(cls, data):
        if isinstance(data, dict) and data.get("d_inner") is None:
            data = {**data, "d_inner": 2 * data.get("d_model", 64)}
        return data


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr0: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    adam_eps: float = Field(default=1e-8, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=10, ge=1)
    clip_norm: float = Field(default=1.0, gt=0)
    seed: int = 0
    total_steps: Optional[int] = Field(default=None, ge=1, description="Derived from epochs and corpus size when unset")
    workers: int = Field(default=1, ge=1, description="Threads for independent batch items")


class ExperimentConfig(BaseModel):
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def _mels_agree(self) -> "ExperimentConfig":
        if self.frontend.n_mels != self.model.n_mels:
            raise ValueError("frontend.n_mels and model.n_mels differ")
        return self


def _default_tone_map() -> Dict[str, float]:
    return {word: 400.0 + 150.0 * i for i, word in enumerate(DIGIT_WORDS)}


class SynthSpec(BaseModel):
    n_utterances: int = Field(default=32, ge=1)
    seed: int = 0
    digits_per_utterance: Tuple[int, int] = (1, 4)
    tone_map: Dict[str, float] = Field(default_factory=_default_tone_map)
    tone_ms: int = Field(default=100, gt=0)
    gap_ms: int = Field(default=50, ge=0)
    noise_amplitude: float = Field(default=0.0, ge=0)
    tone_amplitude: float = Field(default=0.5, gt=0, le=1)
    sample_rate: int = Field(default=16000, gt=0)

    @field_validator("digits_per_utterance")
    @classmethod
    def _check_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = value
        if lo < 1 or hi < lo:
            raise ValueError("digits_per_utterance must be (min >= 1, max >= min)")
        return value

    @model_validator(mode="after")
    def _check_tones(self) -> "SynthSpec":
        freqs = list(self.tone_map.values())
        if len(set(freqs)) != len(freqs):
            raise ValueError("tone frequencies must be distinct")
        if any(f <= 0 or f >= self.sample_rate / 2 for f in freqs):
            raise ValueError("tone frequencies must lie below Nyquist")
        return self


class ManifestEntry(BaseModel):
    audio: str = Field(..., description="Audio path, relative to the manifest file")
    text: str = Field(..., description="Reference transcript")


# Request Models
class TrainRequest(BaseModel):
    manifest: str = Field(..., description="Training manifest (JSON lines)")
    val_manifest: str = Field(..., description="Validation manifest")
    vocab: str = Field(..., description="Vocabulary file produced by bpe-train")
    out_dir: str = Field(..., description="Directory for checkpoints and metrics")
    config: Optional[ExperimentConfig] = None


class EvaluateRequest(BaseModel):
    manifest: str
    checkpoint: Optional[str] = Field(None, description="Defaults to the service checkpoint")
    vocab: Optional[str] = Field(None, description="Defaults to the service vocabulary")


# Response Models
class RunStatusResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    run_id: int
    out_dir: str
    status: str
    total_steps: int
    completed_steps: int
    epoch: int
    progress_percent: float
    best_wer: Optional[float]
    last_checkpoint: Optional[str]
    error_message: Optional[str]
    started_at: datetime
    completed_at: Optional[datetime]


class UtteranceResult(BaseModel):
    audio: str
    ref: str
    hyp: str
    wer: float


class EvaluateResponse(BaseModel):
    corpus_wer: float
    n_utterances: int
    skipped: List[str]
    real_time_factor: float
    rows: List[UtteranceResult]


class TranscribeResponse(BaseModel):
    transcript: str
    tokens: List[int]
