"""Synthetic spoken-digit corpus: one pure tone per digit word, separated by silence."""
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from app.models import ManifestEntry, SynthSpec
from app.services.audio import Waveform, write_wav
from app.services.evaluation import write_manifest
from app.services.logger import app_logger

SPLITS = ("train", "val", "test")


def render_utterance(words: Sequence[str], spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    tone_len = sr * spec.tone_ms // 1000
    gap = np.zeros(sr * spec.gap_ms // 1000)
    t = np.arange(tone_len) / sr
    pieces: List[np.ndarray] = []
    for i, word in enumerate(words):
        if i:
            pieces.append(gap)
        pieces.append(spec.tone_amplitude * np.sin(2 * np.pi * spec.tone_map[word] * t))
    samples = np.concatenate(pieces)
    if spec.noise_amplitude > 0:
        samples = samples + spec.noise_amplitude * rng.standard_normal(len(samples))
    return np.clip(samples, -1.0, 1.0)


def split_sizes(n: int) -> Dict[str, int]:
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return {"train": n_train, "val": n_val, "test": n - n_train - n_val}


def synth_corpus(spec: SynthSpec, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write wavs/utt_NNNN.wav plus train/val/test manifests; returns the manifest paths."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    words = list(spec.tone_map)
    lo, hi = spec.digits_per_utterance

    entries: List[ManifestEntry] = []
    for i in range(spec.n_utterances):
        count = int(rng.integers(lo, hi + 1))
        transcript = [words[j] for j in rng.integers(0, len(words), size=count)]
        name = f"utt_{i:04d}.wav"
        write_wav(wav_dir / name, Waveform(render_utterance(transcript, spec, rng), spec.sample_rate))
        entries.append(ManifestEntry(audio=f"wavs/{name}", text=" ".join(transcript)))

    order = rng.permutation(len(entries))
    manifests = {}
    start = 0
    for split, size in split_sizes(len(entries)).items():
        path = out_dir / f"{split}.jsonl"
        write_manifest(path, [entries[k] for k in sorted(order[start:start + size])])
        manifests[split] = path
        start += size

    app_logger.corpus_written(str(out_dir), len(entries))
    return manifests
