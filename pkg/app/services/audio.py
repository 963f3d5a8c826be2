"""
Audio ingestion and log-Mel feature extraction.

Pipeline: load_wav -> resample (16 kHz) -> normalize -> pad_or_trim -> log_mel.
Every stage is a pure function of its inputs.
"""
import struct
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import Literal, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import firwin, get_window, resample_poly

from app.errors import ContractError, MalformedHeaderError, TruncatedDataError, UnsupportedCodecError
from app.models import FrontendConfig

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

MIN_SOURCE_RATE = 8000
MAX_SOURCE_RATE = 48000
KAISER_BETA = 8.6
RESAMPLE_ZERO_CROSSINGS = 16

PathLike = Union[str, Path]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels)
    n_mels: int
    hop_samples: int
    win_samples: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]


# WAV container

def _chunks(raw: bytes):
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id, size = struct.unpack("<4sI", raw[pos:pos + 8])
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def load_wav(path: PathLike) -> Waveform:
    """Read a RIFF/WAVE file (PCM16 or float32, mono or stereo) as a mono float waveform."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedHeaderError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    for chunk_id, start, size in _chunks(raw):
        if chunk_id == b"fmt ":
            if size < 16 or start + size > len(raw):
                raise MalformedHeaderError(f"{path}: fmt chunk too short")
            fmt = raw[start:start + size]
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeaderError(f"{path}: data chunk precedes fmt chunk")
            if start + size > len(raw):
                raise TruncatedDataError(f"{path}: data chunk declares {size} bytes, "
                                         f"{len(raw) - start} present")
            data = raw[start:start + size]
            break
    if fmt is None or data is None:
        raise MalformedHeaderError(f"{path}: missing fmt or data chunk")

    codec, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if codec == WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        codec = struct.unpack("<H", fmt[24:26])[0]
    if rate == 0 or channels == 0 or block_align != channels * bits // 8:
        raise MalformedHeaderError(f"{path}: inconsistent format fields")

    if codec == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif codec == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"{path}: format {codec:#06x} with {bits} bits per sample")
    if channels > 2:
        raise UnsupportedCodecError(f"{path}: {channels} channels")
    if len(data) % block_align:
        raise TruncatedDataError(f"{path}: partial sample frame at end of data")

    frames = np.frombuffer(data, dtype=dtype).reshape(-1, channels).astype(np.float64) * scale
    return Waveform(samples=frames.mean(axis=1), sample_rate=rate)


def write_wav(path: PathLike, w: Waveform, codec: Literal["pcm16", "float32"] = "pcm16"):
    if codec == "pcm16":
        payload = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768).astype("<i2").tobytes()
        fmt_tag, bits = WAVE_FORMAT_PCM, 16
    elif codec == "float32":
        payload = np.asarray(w.samples, dtype="<f4").tobytes()
        fmt_tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ContractError(f"unknown codec {codec!r}")
    block_align = bits // 8
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         fmt_tag, 1, w.sample_rate, w.sample_rate * block_align, block_align, bits,
                         b"data", len(payload))
    Path(path).write_bytes(header + payload)


# Sample-domain stages

@lru_cache(maxsize=16)
def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass at the lower Nyquist, 16 zero crossings per side.

    Unit DC gain; resample_poly applies the factor `up` itself.
    """
    rate = max(up, down)
    taps = firwin(2 * RESAMPLE_ZERO_CROSSINGS * rate + 1, 1.0 / rate, window=("kaiser", KAISER_BETA))
    taps.setflags(write=False)
    return taps


def resample(w: Waveform, target: int) -> Waveform:
    """Polyphase resampling through `resample_filter`."""
    if not MIN_SOURCE_RATE <= w.sample_rate <= MAX_SOURCE_RATE:
        raise ContractError(f"source rate {w.sample_rate} outside [{MIN_SOURCE_RATE}, {MAX_SOURCE_RATE}]")
    if w.sample_rate == target:
        return Waveform(w.samples.copy(), target)
    g = gcd(target, w.sample_rate)
    up, down = target // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down, window=resample_filter(up, down))
    n_out = int(round(len(w.samples) * target / w.sample_rate))
    return Waveform(np.asarray(out[:n_out], dtype=np.float64), target)


def normalize(w: Waveform) -> Waveform:
    """Scale to peak |sample| == 1; silence is returned unchanged."""
    peak = np.max(np.abs(w.samples)) if len(w.samples) else 0.0
    if peak == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples / peak, w.sample_rate)


def pad_or_trim(w: Waveform, target_samples: int) -> Waveform:
    if target_samples < 1:
        raise ContractError("target_samples must be >= 1")
    samples = w.samples[:target_samples]
    if len(samples) < target_samples:
        samples = np.concatenate([samples, np.zeros(target_samples - len(samples))])
    return Waveform(np.array(samples, dtype=np.float64), w.sample_rate)


# Spectral stages

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int, f_max: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    bank = np.clip(np.minimum(rising, falling), 0.0, None)
    bank.flags.writeable = False
    return bank


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_fft // 2 + 1), spanning 0..f_max."""
    return _filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_max)


@lru_cache(maxsize=4)
def _dft_matrix(n_fft: int) -> np.ndarray:
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    return np.exp(-2j * np.pi * k * n / n_fft)


def stft_power(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """|STFT|^2 of Hann-windowed frames, shape (frames, n_fft // 2 + 1)."""
    if len(samples) < cfg.win_samples:
        raise ContractError(f"need at least {cfg.win_samples} samples, got {len(samples)}")
    window = get_window("hann", cfg.win_samples)
    frames = sliding_window_view(samples, cfg.win_samples)[::cfg.hop_samples] * window
    if cfg.stft_method == "fft":
        spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    else:
        spectrum = frames @ _dft_matrix(cfg.n_fft)[:, :cfg.win_samples].T
    return spectrum.real ** 2 + spectrum.imag ** 2


def log_mel(w: Waveform, cfg: FrontendConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ContractError(f"waveform at {w.sample_rate} Hz, frontend expects {cfg.sample_rate} Hz")
    if len(w.samples) != cfg.target_samples:
        raise ContractError(f"waveform has {len(w.samples)} samples, expected {cfg.target_samples}")

    energies = stft_power(w.samples, cfg) @ mel_filterbank(cfg).T
    logs = np.log10(np.maximum(energies, cfg.log_floor))
    std = logs.std()
    values = np.zeros_like(logs) if std == 0 else (logs - logs.mean()) / std
    return MelSpectrogram(values=values, n_mels=cfg.n_mels, hop_samples=cfg.hop_samples,
                          win_samples=cfg.win_samples)


def features(w: Waveform, cfg: FrontendConfig) -> MelSpectrogram:
    """Resample, normalize and pad/trim a waveform, then extract log-Mel features."""
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    return log_mel(pad_or_trim(normalize(w), cfg.target_samples), cfg)


def load_audio(path: PathLike, cfg: FrontendConfig) -> MelSpectrogram:
    return features(load_wav(path), cfg)
