"""Shared fixtures. The database and log directory point at a scratch directory
before any app module is imported."""
import os
import shutil
import tempfile

_SCRATCH = tempfile.mkdtemp(prefix="samba_asr_tests_")
os.environ["SAMBA_ASR_DB_PATH"] = os.path.join(_SCRATCH, "test.db")
os.environ["SAMBA_ASR_LOGS_DIR"] = os.path.join(_SCRATCH, "logs")
os.environ["SAMBA_ASR_LOG_LEVEL"] = "WARNING"

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.database import Base, engine  # noqa: E402
from app.models import ExperimentConfig, FrontendConfig, ModelConfig, SynthSpec, TrainConfig  # noqa: E402
from app.services.audio import MelSpectrogram  # noqa: E402
from app.services.evaluation import read_manifest  # noqa: E402
from app.services.numerics import Tensor  # noqa: E402
from app.services.samba import SambaASR  # noqa: E402
from app.services.synth import synth_corpus  # noqa: E402
from app.services.tokenizer import save_vocab, train_bpe  # noqa: E402

TINY_MELS = 4


def pytest_sessionfinish(session, exitstatus):
    shutil.rmtree(_SCRATCH, ignore_errors=True)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(d_model=8, n_encoder_layers=2, n_decoder_layers=2, d_state=4, conv_kernel=4,
                  vocab_size=12, max_text_len=16, n_mels=TINY_MELS)
    values.update(overrides)
    return ModelConfig(**values)


def random_mel(frames: int = 20, n_mels: int = TINY_MELS, seed: int = 0) -> MelSpectrogram:
    values = np.random.default_rng(seed).standard_normal((frames, n_mels))
    return MelSpectrogram(values=values, n_mels=n_mels, hop_samples=160, win_samples=400)


def randomize_out_projections(model: SambaASR, seed: int = 0, scale: float = 0.3):
    """Replace the zero-initialized block output projections so every block contributes."""
    rng = np.random.default_rng(seed)
    for name, tensor in model.store.items():
        if name.endswith("out_proj.weight"):
            model.store[name] = Tensor(rng.uniform(-scale, scale, size=tensor.shape), requires_grad=True, name=name)


# Short utterances (at most two digits) featurized at low resolution
CORPUS_FRONTEND = FrontendConfig(target_samples=4000, n_mels=16)


def corpus_experiment(vocab_size: int, **train_overrides) -> ExperimentConfig:
    train = dict(lr0=1e-2, batch_size=4, epochs=2, seed=0)
    train.update(train_overrides)
    return ExperimentConfig(
        frontend=CORPUS_FRONTEND,
        model=tiny_model_config(vocab_size=vocab_size, n_mels=CORPUS_FRONTEND.n_mels, max_text_len=32,
                                n_encoder_layers=1, n_decoder_layers=1),
        train=TrainConfig(**train),
    )


@pytest.fixture(scope="function")
def test_db():
    """Create a fresh test database for each test."""
    Base.metadata.create_all(bind=engine)
    yield
    Base.metadata.drop_all(bind=engine)


@pytest.fixture
def temp_folder():
    """Create a temporary folder."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def tone_corpus(temp_folder):
    """Ten-utterance synthetic corpus with a BPE vocabulary trained on its transcripts."""
    spec = SynthSpec(n_utterances=10, seed=0, digits_per_utterance=(1, 2))
    manifests = synth_corpus(spec, os.path.join(temp_folder, "corpus"))
    texts = [entry.text for entry in read_manifest(manifests["train"])]
    vocab = train_bpe(texts, 256 + 4 + 8)
    vocab_path = os.path.join(temp_folder, "vocab.txt")
    save_vocab(vocab, vocab_path)
    return {"manifests": manifests, "vocab": vocab, "vocab_path": vocab_path, "root": temp_folder}
